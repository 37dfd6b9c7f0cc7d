//! `eqprop` command-line tool.
//!
//! Exit codes: 0 on success, 1 for usage and input errors, 2 for numerical
//! failures (divergence, failed oracle checks).

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use eqprop::data::{load_mnist_dir, one_hot, sample_indices, Dataset, Split};
use eqprop::gdd::{gdd_sweep, write_sweep_csv};
use eqprop::gradients::{finite_diff_loss_grad, projected_cost_state_grad, rbp_gradients, bptt_gradients};
use eqprop::model::{Hyperparams, LayeredNetwork, Mode};
use eqprop::numerics::{angle_between, norm, ActivationKind};
use eqprop::phases::{relax, run_free_phase};
use eqprop::toy::{toy_simulate, ToyParams};
use eqprop::training::{angle_controlled_init, evaluate, glorot_init, init_network, train, write_report_csv, NetSpec};
use eqprop::{Error, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "eqprop", version, about = "Equilibrium propagation experiments")]
struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for CSV output; CSV goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "EQPROP_MNIST_DIR", default_value = "data/mnist")]
    mnist_dir: PathBuf,
    /// Overrides the first-phase length.
    #[arg(long = "T")]
    t_free: Option<usize>,
    /// Overrides the second-phase length.
    #[arg(long = "K")]
    k_nudge: Option<usize>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.t_free {
            cfg.t_free = t;
        }
        if let Some(k) = self.k_nudge {
            cfg.k_nudge = k;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Series of the scalar toy model as CSV.
    Toy {
        #[arg(long, default_value_t = 1.0)]
        theta: f64,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        #[arg(long = "T", default_value_t = 100)]
        t_free: usize,
        #[arg(long = "K", default_value_t = 20)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare normalized updates with BPTT gradients on MNIST samples.
    Gdd {
        #[command(flatten)]
        common: Common,
        /// Overrides the number of samples from the config file.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Check BPTT, RBP and finite differences against each other.
    RbpCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on MNIST; writes train.csv and checkpoint.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the number of epochs from the config file.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Test error of a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// First-phase length used for prediction.
        #[arg(long = "T", default_value_t = 30)]
        t_free: usize,
        #[arg(long, env = "EQPROP_MNIST_DIR", default_value = "data/mnist")]
        mnist_dir: PathBuf,
        /// Leading slice of the test set; all of it when absent.
        #[arg(long)]
        test_size: Option<usize>,
    },
    /// Measured angle of angle-controlled initialization for several targets.
    AngleInitCheck {
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "0,45,90,135,180")]
        angles: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Where CSV output goes: a file in the output directory, or stdout.
fn csv_sink(out: Option<&Path>, name: &str) -> anyhow::Result<Box<dyn Write>> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            Ok(Box::new(BufWriter::new(file)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn head(d: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) => d.head(n),
        None => d,
    }
}

fn run_toy(p: ToyParams, out: Option<&Path>) -> anyhow::Result<()> {
    let series = toy_simulate(&p)?;
    let mut w = csv_sink(out, "toy.csv")?;
    series.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run_gdd(common: &Common, samples: Option<usize>) -> anyhow::Result<()> {
    let cfg = common.load()?;
    let n = samples.unwrap_or(cfg.samples);
    let test = load_mnist_dir(&common.mnist_dir, Split::Test)?;
    let picked: Vec<(Vec<f64>, Vec<f64>)> = sample_indices(test.len(), n, cfg.seed)
        .into_iter()
        .map(|i| (test.image(i).to_vec(), one_hot(test.labels[i])))
        .collect();
    let train_cfg = cfg.train_config()?;
    let net = init_network(&cfg.net_spec()?, cfg.algorithm, train_cfg.init_angle_deg, cfg.seed)?;
    let hyper = cfg.hyperparams()?;
    hyper.validate(&net)?;
    let rows = gdd_sweep(cfg.algorithm, &net, &picked, &hyper, &cfg.sweep_betas(), &cfg.sweep_etas()?)?;
    let mut w = csv_sink(common.out.as_deref(), "gdd.csv")?;
    write_sweep_csv(&mut w, &net, &rows)?;
    w.flush()?;
    for r in &rows {
        let angle = r
            .mean
            .total_angle_deg
            .map_or_else(|| "undef".to_string(), |a| format!("{a:.4}"));
        eprintln!(
            "{} beta={} eta={:?}: total_angle={angle} deg over {} samples",
            r.algorithm, r.beta, r.eta, r.n_samples
        );
    }
    Ok(())
}

struct Check {
    name: &'static str,
    value: f64,
    limit: f64,
}

fn oracle_net(layers: Vec<usize>, input: usize, seed: u64) -> anyhow::Result<LayeredNetwork> {
    let spec = NetSpec {
        layer_sizes: layers,
        input_size: input,
        activation: ActivationKind::Tanh,
        mode: Mode::DiscreteTime,
        tied: true,
    };
    let mut net = glorot_init(&spec, seed)?;
    net.weights.scale(1.5);
    Ok(net)
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b)
}

fn run_rbp_check(seed: u64) -> anyhow::Result<bool> {
    let mut checks = Vec::new();

    let net = oracle_net(vec![4, 8], 10, seed)?;
    let x: Vec<f64> = (0..10).map(|i| (0.3 * i as f64 + seed as f64).cos()).collect();
    let y = vec![0.2, -0.1, 0.4, 0.0];
    let k = 400;
    let hyper = Hyperparams {
        t_free: 2000,
        k_nudge: k,
        beta: 0.01,
        lr: vec![0.0; 2],
        random_beta: false,
        lr_tiny_scale: None,
        convergence_tol: 1e-12,
    };
    let traj = run_free_phase(&net, &x, &hyper)?;
    let bptt = bptt_gradients(&net, &x, &traj, &y, k)?;
    let rbp = rbp_gradients(&net, &x, traj.steady_state(), &y, k, 1e-12)?;
    let mut worst: f64 = 0.0;
    for t in 0..=k {
        let (a, b) = (bptt.state_grads[t].flatten(), rbp.state_grads[t].flatten());
        worst = a.iter().zip(&b).fold(worst, |m, (u, v)| m.max((u - v).abs()));
    }
    for t in 1..=k {
        let (a, b) = (bptt.param_grad(t).flatten(), rbp.param_grad(t).flatten());
        worst = a.iter().zip(&b).fold(worst, |m, (u, v)| m.max((u - v).abs()));
    }
    checks.push(Check {
        name: "BPTT vs RBP, max abs difference",
        value: worst,
        limit: 1e-9,
    });

    let fd = finite_diff_loss_grad(&net, &x, &y, 2000, 1e-5, Some(1e-12))?;
    checks.push(Check {
        name: "summed RBP gradient vs finite differences, relative error",
        value: rel_l2(&rbp.total_param_grad().flatten(), &fd.flatten()),
        limit: 1e-4,
    });

    let small = oracle_net(vec![2, 4], 6, seed.wrapping_add(1))?;
    let xs = vec![0.9, -0.4, 0.3, 0.7, -0.8, 0.1];
    let ys = vec![0.5, -0.5];
    let (s_star, _) = relax(&small, &xs, 2000)?;
    let rbp_s = rbp_gradients(&small, &xs, &s_star, &ys, 5, 1e-12)?;
    let mut worst: f64 = 0.0;
    for t in 0..=5 {
        let fd = projected_cost_state_grad(&small, &xs, &s_star, &ys, t, 1e-6)?;
        worst = worst.max(rel_l2(&rbp_s.state_grads[t].flatten(), &fd.flatten()));
    }
    checks.push(Check {
        name: "RBP state gradient vs projected cost, relative error",
        value: worst,
        limit: 1e-4,
    });

    let mut all = true;
    for c in &checks {
        let pass = c.value < c.limit;
        all &= pass;
        println!(
            "{} {}: {:.3e} (limit {:.0e})",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.limit
        );
    }
    Ok(all)
}

fn run_train(common: &Common, epochs: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = common.load()?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let train_set = head(load_mnist_dir(&common.mnist_dir, Split::Train)?, cfg.train_size);
    let test_set = head(load_mnist_dir(&common.mnist_dir, Split::Test)?, cfg.test_size);
    let train_cfg = cfg.train_config()?;
    let mut net = init_network(&cfg.net_spec()?, cfg.algorithm, train_cfg.init_angle_deg, cfg.seed)?;
    if let Ok(angle) = eqprop::training::measured_angle_deg(&net.weights) {
        log::info!("initial angle between forward and backward weights: {angle:.2} deg");
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    log::info!(
        "training {} on {} samples, testing on {}",
        net.topology_label(),
        train_set.len(),
        test_set.len()
    );
    let mut report = train(&mut net, &train_set, &test_set, &train_cfg, |r| {
        eprintln!(
            "epoch {:>3}: train {:6.2}%  test {:6.2}%",
            r.epoch, r.train_err, r.test_err
        );
    })?;
    let checkpoint = out.join("checkpoint.json");
    net.save_checkpoint(&checkpoint)?;
    report.checkpoint = Some(checkpoint.clone());
    let mut w = csv_sink(Some(&out), "train.csv")?;
    write_report_csv(&mut w, &report)?;
    w.flush()?;
    println!(
        "wrote {} and {} ({:.1} s)",
        out.join("train.csv").display(),
        checkpoint.display(),
        report.wall_time_s
    );
    Ok(())
}

fn run_eval(checkpoint: &Path, t_free: usize, mnist_dir: &Path, test_size: Option<usize>) -> anyhow::Result<()> {
    let net = LayeredNetwork::load_checkpoint(checkpoint)?;
    let test_set = head(load_mnist_dir(mnist_dir, Split::Test)?, test_size);
    let hyper = Hyperparams {
        t_free,
        k_nudge: 1,
        beta: 1.0,
        lr: vec![0.0; net.n_hidden() + 1],
        random_beta: false,
        lr_tiny_scale: None,
        convergence_tol: 1e-6,
    };
    let err = evaluate(&net, &test_set, &hyper)?;
    println!("test_err={err} samples={}", test_set.len());
    Ok(())
}

fn run_angle_check(size: usize, seed: u64, angles: &[f64], out: Option<&Path>) -> anyhow::Result<()> {
    if size == 0 {
        bail!("size must be positive");
    }
    let spec = NetSpec {
        layer_sizes: vec![size, size],
        input_size: 1,
        activation: ActivationKind::Tanh,
        mode: Mode::DiscreteTime,
        tied: true,
    };
    let net = glorot_init(&spec, seed)?;
    let forward = &net.weights.forward;
    let mut w = csv_sink(out, "angle_init.csv")?;
    writeln!(w, "target_deg,measured_deg")?;
    for &psi in angles {
        let backward = angle_controlled_init(forward, psi, seed)?;
        let measured = angle_between(forward[0].as_slice(), backward[0].transpose().as_slice())?;
        writeln!(w, "{psi},{measured}")?;
    }
    w.flush()?;
    Ok(())
}

/// The error chain, skipping causes already quoted by an outer message.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if text.contains(&msg) {
            continue;
        }
        if !text.is_empty() {
            text.push_str(": ");
        }
        text.push_str(&msg);
    }
    text
}

/// Output piped into `head` and the like is not a failure.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<io::Error>())
        .any(|io| io.kind() == io::ErrorKind::BrokenPipe)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let started = Instant::now();
    let ok = match &cli.command {
        Command::Toy {
            theta,
            beta,
            eta,
            t_free,
            k,
            out,
        } => {
            let p = ToyParams {
                theta: *theta,
                beta: *beta,
                eta: *eta,
                t_free: *t_free,
                k: *k,
            };
            run_toy(p, out.as_deref()).map(|_| true)?
        }
        Command::Gdd { common, samples } => run_gdd(common, *samples).map(|_| true)?,
        Command::RbpCheck { seed } => run_rbp_check(*seed)?,
        Command::Train { common, epochs } => run_train(common, *epochs).map(|_| true)?,
        Command::Eval {
            checkpoint,
            t_free,
            mnist_dir,
            test_size,
        } => run_eval(checkpoint, *t_free, mnist_dir, *test_size).map(|_| true)?,
        Command::AngleInitCheck {
            size,
            seed,
            angles,
            out,
        } => run_angle_check(*size, *seed, angles, out.as_deref()).map(|_| true)?,
    };
    log::debug!("finished in {:.2} s", started.elapsed().as_secs_f64());
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: oracle check failed");
            ExitCode::from(2)
        }
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            let numerical = e.downcast_ref::<Error>().is_some_and(Error::is_numerical);
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
