//! Mini-batch training with EP, C-EP and C-VF, initialization schemes and
//! evaluation.

use std::io::{self, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{BlockId, Hyperparams, LayeredNetwork, Mode, NetworkState, Nudge, Weights};
use crate::numerics::{angle_between, ActivationKind, Matrix};
use crate::phases::{relax, Algorithm};
use crate::rng::{stream_rng, Stream};

/// Skipping more than this fraction of an epoch's samples aborts training.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

/// Architecture of a network before its weights exist.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    /// Output first, as in [`LayeredNetwork::layer_sizes`].
    pub layer_sizes: Vec<usize>,
    pub input_size: usize,
    pub activation: ActivationKind,
    pub mode: Mode,
    pub tied: bool,
}

fn glorot_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a);
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Glorot-uniform weights, one random stream per block.
pub fn glorot_init(spec: &NetSpec, seed: u64) -> Result<LayeredNetwork> {
    let n_hidden = spec.layer_sizes.len().saturating_sub(1);
    let d = &spec.layer_sizes;
    let forward = (0..n_hidden)
        .map(|n| glorot_matrix(d[n], d[n + 1], &mut stream_rng(seed, Stream::Init, n as u64)))
        .collect();
    let input = glorot_matrix(
        *d.last().ok_or_else(|| Error::InvalidHyper("no layers".into()))?,
        spec.input_size,
        &mut stream_rng(seed, Stream::Init, n_hidden as u64),
    );
    let backward = (!spec.tied).then(|| {
        (0..n_hidden)
            .map(|n| {
                let sub = (n_hidden + 1 + n) as u64;
                glorot_matrix(d[n + 1], d[n], &mut stream_rng(seed, Stream::Init, sub))
            })
            .collect()
    });
    LayeredNetwork::new(
        spec.layer_sizes.clone(),
        spec.input_size,
        spec.activation,
        spec.mode,
        Weights {
            forward,
            input,
            backward,
        },
    )
}

/// Backward weights `M ⊙ W_fᵀ` where each mask entry is `-1` with
/// probability `½(1 − cos Ψ)`, so the expected angle to `W_fᵀ` is `Ψ`.
pub fn angle_controlled_init(forward: &[Matrix], psi_deg: f64, seed: u64) -> Result<Vec<Matrix>> {
    if !(0.0..=180.0).contains(&psi_deg) {
        return Err(Error::InvalidHyper(format!("angle {psi_deg} not in [0, 180]")));
    }
    let p = 0.5 * (1.0 - psi_deg.to_radians().cos());
    Ok(forward
        .iter()
        .enumerate()
        .map(|(n, w)| {
            let mut rng = stream_rng(seed, Stream::AngleMask, n as u64);
            let mut b = w.transpose();
            for v in b.as_mut_slice() {
                if rng.gen::<f64>() < p {
                    *v = -*v;
                }
            }
            b
        })
        .collect())
}

/// Angle in degrees between all forward weights and the transposed backward
/// weights, each flattened and concatenated.
pub fn measured_angle_deg(weights: &Weights) -> Result<f64> {
    let backward = weights
        .backward
        .as_ref()
        .ok_or(Error::RequiresUntied("angle measurement"))?;
    let f: Vec<f64> = weights.forward.iter().flat_map(|m| m.as_slice().to_vec()).collect();
    let b: Vec<f64> = backward
        .iter()
        .flat_map(|m| m.transpose().as_slice().to_vec())
        .collect();
    angle_between(&f, &b)
}

/// Glorot weights, with angle-controlled feedback for C-VF.
pub fn init_network(
    spec: &NetSpec,
    algorithm: Algorithm,
    init_angle_deg: Option<f64>,
    seed: u64,
) -> Result<LayeredNetwork> {
    let tied = !algorithm.needs_untied();
    let mut net = glorot_init(&NetSpec { tied, ..spec.clone() }, seed)?;
    if let (false, Some(psi)) = (tied, init_angle_deg) {
        net.weights.backward = Some(angle_controlled_init(&net.weights.forward, psi, seed)?);
    }
    Ok(net)
}

/// Draws the per-batch sign of β.
#[derive(Debug, Clone)]
pub struct BetaSampler {
    rng: ChaCha8Rng,
}

impl BetaSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: stream_rng(seed, Stream::BetaSign, 0),
        }
    }

    /// `|beta|` with a fair random sign when `random` is set, else `beta`.
    pub fn next(&mut self, beta: f64, random: bool) -> f64 {
        if !random {
            return beta;
        }
        if self.rng.gen_bool(0.5) {
            beta.abs()
        } else {
            -beta.abs()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub hyper: Hyperparams,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Target angle between forward and backward weights (C-VF only).
    pub init_angle_deg: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self, net: &LayeredNetwork) -> Result<()> {
        self.hyper.validate(net)?;
        if self.batch_size == 0 {
            return Err(Error::InvalidHyper("batch_size must be >= 1".into()));
        }
        if let Some(psi) = self.init_angle_deg {
            if !(0.0..=180.0).contains(&psi) {
                return Err(Error::InvalidHyper(format!("angle {psi} not in [0, 180]")));
            }
        }
        check_algorithm(net, self.algorithm)
    }
}

fn check_algorithm(net: &LayeredNetwork, algorithm: Algorithm) -> Result<()> {
    match (algorithm.needs_untied(), net.tied()) {
        (true, true) => Err(Error::RequiresUntied("C-VF")),
        (false, false) => Err(Error::RequiresTied("EP and C-EP")),
        _ => Ok(()),
    }
}

/// How many samples of a batch took part in the update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchOutcome {
    pub used: usize,
    pub skipped: usize,
}

/// Per-sample quantities reused by every update of a batch.
struct Sample<'a> {
    x: &'a [f64],
    y: &'a [f64],
    px: Vec<f64>,
}

fn presyn_layers(net: &LayeredNetwork, s: &NetworkState) -> Vec<Vec<f64>> {
    s.layers
        .iter()
        .map(|l| net.presynaptic(l).into_owned())
        .collect()
}

/// Per-sample factors of one update between two states.
enum Factors {
    Contrastive {
        from: Vec<Vec<f64>>,
        to: Vec<Vec<f64>>,
    },
    VectorField {
        pre: Vec<Vec<f64>>,
        post: Vec<Vec<f64>>,
    },
}

fn factors(net: &LayeredNetwork, algorithm: Algorithm, from: &NetworkState, to: &NetworkState) -> Factors {
    match algorithm {
        Algorithm::Ep | Algorithm::Cep => Factors::Contrastive {
            from: presyn_layers(net, from),
            to: presyn_layers(net, to),
        },
        Algorithm::Cvf => Factors::VectorField {
            pre: presyn_layers(net, from),
            post: from
                .layers
                .iter()
                .zip(&to.layers)
                .map(|(a, b)| b.iter().zip(a).map(|(u, v)| u - v).collect())
                .collect(),
        },
    }
}

/// `θ += η_n / (β · n) Σ_b Δ_b` blockwise, summed in sample order.
fn apply_mean_update(
    net: &mut LayeredNetwork,
    items: &[(&Sample, Factors)],
    beta: f64,
    lr: &[f64],
) {
    if items.is_empty() {
        return;
    }
    let n_hidden = net.n_hidden();
    let inv = 1.0 / (beta * items.len() as f64);
    for (id, m) in net.weights.blocks_mut() {
        let eta = lr[id.lr_index(n_hidden)];
        if eta == 0.0 {
            continue;
        }
        let c = eta * inv;
        let mut terms: Vec<(f64, &[f64], &[f64])> = Vec::with_capacity(2 * items.len());
        for (sample, f) in items {
            match (f, id) {
                (Factors::Contrastive { from, to }, BlockId::Forward(n)) => {
                    terms.push((c, &to[n], &to[n + 1]));
                    terms.push((-c, &from[n], &from[n + 1]));
                }
                (Factors::Contrastive { from, to }, BlockId::Input) => {
                    terms.push((c, &to[n_hidden], &sample.px));
                    terms.push((-c, &from[n_hidden], &sample.px));
                }
                (Factors::Contrastive { .. }, BlockId::Backward(_)) => {}
                (Factors::VectorField { pre, post }, BlockId::Forward(n)) => {
                    terms.push((c, &post[n], &pre[n + 1]));
                }
                (Factors::VectorField { post, .. }, BlockId::Input) => {
                    terms.push((c, &post[n_hidden], &sample.px));
                }
                (Factors::VectorField { pre, post }, BlockId::Backward(n)) => {
                    terms.push((c, &post[n + 1], &pre[n]));
                }
            }
        }
        m.add_outer_sum(&terms);
    }
}

fn nudged_step(net: &LayeredNetwork, s: &Sample, state: &NetworkState, beta: f64) -> NetworkState {
    let drive = net.input_drive(s.x);
    net.step_with_drive(
        &drive,
        state,
        Some(Nudge {
            target: s.y,
            beta,
        }),
    )
}

/// Free phase for every sample; divergent ones come back as `None`.
fn free_states(net: &LayeredNetwork, samples: &[Sample], t_free: usize) -> Result<Vec<Option<NetworkState>>> {
    samples
        .par_iter()
        .map(|s| match relax(net, s.x, t_free) {
            Ok((state, _)) => Ok(Some(state)),
            Err(e) if e.is_numerical() => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Shared second phase of a batch. EP applies one update at the end; the
/// continual variants update after every step using the batch-mean `Δ`.
fn batch_second_phase(
    net: &mut LayeredNetwork,
    algorithm: Algorithm,
    samples: &[Sample],
    hyper: &Hyperparams,
    beta: f64,
    lr: &[f64],
) -> Result<BatchOutcome> {
    for s in samples {
        net.check_input(s.x)?;
        net.check_target(s.y)?;
    }
    let free = free_states(net, samples, hyper.t_free)?;
    let mut current = free.clone();
    for step in 0..hyper.k_nudge {
        let snapshot: &LayeredNetwork = net;
        let next: Vec<Option<NetworkState>> = samples
            .par_iter()
            .zip(&current)
            .map(|(s, st)| {
                st.as_ref()
                    .map(|st| nudged_step(snapshot, s, st, beta))
                    .filter(|n| n.is_finite())
            })
            .collect();
        if algorithm != Algorithm::Ep {
            let items: Vec<(&Sample, Factors)> = samples
                .iter()
                .zip(current.iter().zip(&next))
                .filter_map(|(s, pair)| match pair {
                    (Some(a), Some(b)) => Some((s, factors(snapshot, algorithm, a, b))),
                    _ => None,
                })
                .collect();
            apply_mean_update(net, &items, beta, lr);
            if !net.weights.is_finite() {
                return Err(Error::Divergence {
                    phase: "training update",
                    step: step + 1,
                });
            }
        }
        current = next;
    }
    if algorithm == Algorithm::Ep {
        let snapshot = net.clone();
        let items: Vec<(&Sample, Factors)> = samples
            .iter()
            .zip(free.iter().zip(&current))
            .filter_map(|(s, pair)| match pair {
                (Some(a), Some(b)) => Some((s, factors(&snapshot, algorithm, a, b))),
                _ => None,
            })
            .collect();
        apply_mean_update(net, &items, beta, lr);
        if !net.weights.is_finite() {
            return Err(Error::Divergence {
                phase: "training update",
                step: hyper.k_nudge,
            });
        }
    }
    let used = current.iter().filter(|s| s.is_some()).count();
    Ok(BatchOutcome {
        used,
        skipped: samples.len() - used,
    })
}

fn prepare<'a>(net: &LayeredNetwork, batch: &'a [(Vec<f64>, Vec<f64>)]) -> Vec<Sample<'a>> {
    batch
        .iter()
        .map(|(x, y)| Sample {
            x,
            y,
            px: net.presynaptic(x).into_owned(),
        })
        .collect()
}

/// One mini-batch of training with nudging strength `beta` (its sign may
/// already be randomized by the caller). C-EP with `lr_tiny_scale` set goes
/// through [`debug_rescaled_cep`].
pub fn train_minibatch(
    net: &mut LayeredNetwork,
    batch: &[(Vec<f64>, Vec<f64>)],
    algorithm: Algorithm,
    hyper: &Hyperparams,
    beta: f64,
) -> Result<BatchOutcome> {
    check_algorithm(net, algorithm)?;
    if algorithm == Algorithm::Cep && hyper.lr_tiny_scale.is_some() {
        return debug_rescaled_cep(net, batch, hyper, beta);
    }
    let samples = prepare(net, batch);
    batch_second_phase(net, algorithm, &samples, hyper, beta, &hyper.lr)
}

/// C-EP second phase run with `η_tiny = lr_tiny_scale · η`, after which the
/// accumulated change `Δθ` is rescaled: `θ ← θ − Δθ + (η/η_tiny) Δθ`.
pub fn debug_rescaled_cep(
    net: &mut LayeredNetwork,
    batch: &[(Vec<f64>, Vec<f64>)],
    hyper: &Hyperparams,
    beta: f64,
) -> Result<BatchOutcome> {
    check_algorithm(net, Algorithm::Cep)?;
    let scale = hyper
        .lr_tiny_scale
        .ok_or_else(|| Error::InvalidHyper("lr_tiny_scale is required".into()))?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidHyper("lr_tiny_scale must be > 0".into()));
    }
    let start = net.weights.clone();
    let tiny: Vec<f64> = hyper.lr.iter().map(|e| e * scale).collect();
    let samples = prepare(net, batch);
    let outcome = batch_second_phase(net, Algorithm::Cep, &samples, hyper, beta, &tiny)?;
    let mut delta = net.weights.clone();
    delta.axpy(-1.0, &start);
    net.weights.axpy(1.0 / scale - 1.0, &delta);
    if !net.weights.is_finite() {
        return Err(Error::Divergence {
            phase: "rescaled update",
            step: hyper.k_nudge,
        });
    }
    Ok(outcome)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Class predicted after a free phase of `t_free` steps, `None` on divergence.
pub fn predict(net: &LayeredNetwork, x: &[f64], t_free: usize) -> Result<Option<usize>> {
    match relax(net, x, t_free) {
        Ok((s, _)) => Ok(Some(argmax(s.output()))),
        Err(e) if e.is_numerical() => Ok(None),
        Err(e) => Err(e),
    }
}

/// Percentage of misclassified samples; divergent samples count as errors.
pub fn evaluate(net: &LayeredNetwork, dataset: &Dataset, hyper: &Hyperparams) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let wrong: Vec<bool> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            predict(net, dataset.image(i), hyper.t_free)
                .map(|p| p != Some(dataset.labels[i] as usize))
        })
        .collect::<Result<_>>()?;
    let n_wrong = wrong.iter().filter(|&&w| w).count();
    Ok(100.0 * n_wrong as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// Starts at 1.
    pub epoch: usize,
    pub train_err: f64,
    pub test_err: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_time_s: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Full training run; `on_epoch` sees every record as soon as it exists.
pub fn train(
    net: &mut LayeredNetwork,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate(net)?;
    let started = Instant::now();
    let mut sampler = BetaSampler::new(config.seed);
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut skipped = 0;
        for batch in batches(train_set.len(), config.batch_size, config.seed, epoch as u64)? {
            let samples = train_set.samples(&batch.indices);
            let beta = sampler.next(config.hyper.beta, config.hyper.random_beta);
            let out = train_minibatch(net, &samples, config.algorithm, &config.hyper, beta)?;
            if out.skipped > 0 {
                log::warn!("epoch {epoch}: skipped {} divergent samples", out.skipped);
            }
            skipped += out.skipped;
        }
        if skipped as f64 > MAX_SKIPPED_FRACTION * train_set.len() as f64 {
            return Err(Error::BatchDivergence {
                skipped,
                total: train_set.len(),
            });
        }
        let record = EpochRecord {
            epoch,
            train_err: evaluate(net, train_set, &config.hyper)?,
            test_err: evaluate(net, test_set, &config.hyper)?,
            skipped,
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok(TrainReport {
        epochs: records,
        wall_time_s: started.elapsed().as_secs_f64(),
        checkpoint: None,
    })
}

pub const REPORT_HEADER: &str = "epoch,train_err,test_err";

/// `epoch,train_err,test_err` rows and a closing `# final` summary line.
/// Wall time is left out so that reruns produce identical files.
pub fn write_report_csv<W: Write>(mut w: W, report: &TrainReport) -> io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in &report.epochs {
        writeln!(w, "{},{},{}", r.epoch, r.train_err, r.test_err)?;
    }
    if let Some(r) = report.final_record() {
        writeln!(
            w,
            "# final epoch={} train_err={} test_err={}",
            r.epoch, r.train_err, r.test_err
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gdd::normalized_updates_ep;
    use crate::phases::run_nudged_ep;

    fn spec(sizes: Vec<usize>, input: usize, tied: bool) -> NetSpec {
        NetSpec {
            layer_sizes: sizes,
            input_size: input,
            activation: ActivationKind::Tanh,
            mode: Mode::DiscreteTime,
            tied,
        }
    }

    fn hyper(lr: Vec<f64>) -> Hyperparams {
        Hyperparams {
            t_free: 40,
            k_nudge: 6,
            beta: 0.2,
            lr,
            random_beta: false,
            lr_tiny_scale: None,
            convergence_tol: 1e-6,
        }
    }

    fn batch(n: usize, input: usize, out: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..n)
            .map(|b| {
                let x = (0..input).map(|i| ((b * 7 + i * 3) % 11) as f64 / 10.0).collect();
                let mut y = vec![0.0; out];
                y[b % out] = 1.0;
                (x, y)
            })
            .collect()
    }

    #[test]
    fn glorot_is_deterministic_and_bounded() {
        let s = spec(vec![10, 512], 784, true);
        let a = glorot_init(&s, 3).unwrap();
        assert_eq!(a, glorot_init(&s, 3).unwrap());
        assert_ne!(a, glorot_init(&s, 4).unwrap());
        let bound = (6.0f64 / 1296.0).sqrt();
        assert!(a.weights.input.as_slice().iter().all(|v| v.abs() <= bound));
        assert!(a.weights.backward.is_none());
    }

    #[test]
    fn glorot_mean_is_near_zero() {
        let net = glorot_init(&spec(vec![512, 512], 4, true), 11).unwrap();
        let w = net.weights.forward[0].as_slice();
        let a = (6.0f64 / 1024.0).sqrt();
        let sigma = a / 3f64.sqrt() / (w.len() as f64).sqrt();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 3.0 * sigma, "{mean} vs {sigma}");
    }

    #[test]
    fn angle_init_extremes() {
        let net = glorot_init(&spec(vec![5, 7], 3, true), 1).unwrap();
        let f = &net.weights.forward;
        let same = angle_controlled_init(f, 0.0, 2).unwrap();
        assert_eq!(same[0], f[0].transpose());
        let flipped = angle_controlled_init(f, 180.0, 2).unwrap();
        let mut neg = f[0].transpose();
        neg.scale(-1.0);
        assert_eq!(flipped[0], neg);
        let w = Weights {
            backward: Some(flipped),
            ..net.weights.clone()
        };
        assert!((measured_angle_deg(&w).unwrap() - 180.0).abs() < 1e-6);
        assert!(angle_controlled_init(f, 181.0, 2).is_err());
    }

    #[test]
    fn beta_sign_is_fair() {
        let mut s = BetaSampler::new(5);
        let pos = (0..1000).filter(|_| s.next(0.1, true) > 0.0).count();
        assert!((450..=550).contains(&pos), "{pos}");
        assert!((0..10).all(|_| s.next(-0.3, false) == -0.3));
    }

    #[test]
    fn zero_rates_leave_weights_untouched() {
        for algorithm in [Algorithm::Ep, Algorithm::Cep, Algorithm::Cvf] {
            let mut net = init_network(&spec(vec![3, 5], 4, true), algorithm, Some(30.0), 9).unwrap();
            let before = net.clone();
            let out = train_minibatch(&mut net, &batch(4, 4, 3), algorithm, &hyper(vec![0.0; 2]), 0.2).unwrap();
            assert_eq!(out.used, 4);
            assert_eq!(net, before);
        }
    }

    #[test]
    fn ep_single_sample_on_scalar_chain() {
        // 1-1-1 identity chain in discrete time: s = (W01·h, W1x·x + W01·o).
        let mut net = LayeredNetwork::new(
            vec![1, 1],
            1,
            ActivationKind::Identity,
            Mode::DiscreteTime,
            Weights {
                forward: vec![Matrix::new(1, 1, vec![0.5]).unwrap()],
                input: Matrix::new(1, 1, vec![0.4]).unwrap(),
                backward: None,
            },
        )
        .unwrap();
        let h = Hyperparams {
            t_free: 200,
            k_nudge: 200,
            beta: 0.5,
            lr: vec![0.1, 0.2],
            ..hyper(vec![])
        };
        // Free fixed point: o = 0.5 h, h = 0.4 + 0.5 o → h = 0.4/0.75.
        let h0 = 0.4 / 0.75;
        let o0 = 0.5 * h0;
        // Nudged: o = 0.5 h + 0.5 (1 − o), h = 0.4 + 0.5 o.
        let o1 = (0.5 * 0.4 + 0.5) / (1.5 - 0.25);
        let h1 = 0.4 + 0.5 * o1;
        let dw01 = 0.1 / 0.5 * (o1 * h1 - o0 * h0);
        let dw1x = 0.2 / 0.5 * (h1 - h0);
        train_minibatch(&mut net, &[(vec![1.0], vec![1.0])], Algorithm::Ep, &h, 0.5).unwrap();
        assert!((net.weights.forward[0].get(0, 0) - 0.5 - dw01).abs() < 1e-12);
        assert!((net.weights.input.get(0, 0) - 0.4 - dw1x).abs() < 1e-12);
    }

    #[test]
    fn rescale_of_one_is_plain_cep() {
        let base = init_network(&spec(vec![3, 5], 4, true), Algorithm::Cep, None, 2).unwrap();
        let b = batch(5, 4, 3);
        let mut plain = base.clone();
        train_minibatch(&mut plain, &b, Algorithm::Cep, &hyper(vec![0.05, 0.02]), 0.2).unwrap();
        let mut debug = base.clone();
        let h = Hyperparams {
            lr_tiny_scale: Some(1.0),
            ..hyper(vec![0.05, 0.02])
        };
        train_minibatch(&mut debug, &b, Algorithm::Cep, &h, 0.2).unwrap();
        assert_eq!(plain, debug);
    }

    #[test]
    fn rescaled_cep_matches_ep_total_update() {
        let base = init_network(&spec(vec![3, 6], 5, true), Algorithm::Cep, None, 4).unwrap();
        let b = batch(6, 5, 3);
        let lr = vec![0.05, 0.02];
        let h = Hyperparams {
            lr_tiny_scale: Some(1e-5),
            ..hyper(lr.clone())
        };
        let mut net = base.clone();
        debug_rescaled_cep(&mut net, &b, &h, 0.2).unwrap();
        let mut applied = net.weights.clone();
        applied.axpy(-1.0, &base.weights);

        let mut expected = base.weights.zeros_like();
        for (x, y) in &b {
            let (s, _) = relax(&base, x, h.t_free).unwrap();
            let rec = run_nudged_ep(&base, x, &s, y, &Hyperparams { beta: 0.2, ..h.clone() }).unwrap();
            let total = normalized_updates_ep(&rec).unwrap().total_param_update();
            expected.axpy_per_block(&lr, &total);
        }
        expected.scale(1.0 / b.len() as f64);
        let (e, a) = (expected.flatten(), applied.flatten());
        let err: f64 = e.iter().zip(&a).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 1e-3, "{}", err / norm);
    }

    #[test]
    fn evaluate_counts_errors() {
        let net = glorot_init(&spec(vec![10, 8], 4, true), 1).unwrap();
        let n = 30;
        let pixels: Vec<f64> = (0..n * 4).map(|i| (i % 5) as f64 / 4.0).collect();
        let preds: Vec<u8> = (0..n)
            .map(|i| predict(&net, &pixels[i * 4..(i + 1) * 4], 40).unwrap().unwrap() as u8)
            .collect();
        let right = Dataset::new(pixels.clone(), 4, preds.clone()).unwrap();
        assert_eq!(evaluate(&net, &right, &hyper(vec![0.0; 2])).unwrap(), 0.0);
        let wrong = Dataset::new(pixels, 4, preds.iter().map(|p| (p + 1) % 10).collect()).unwrap();
        assert_eq!(evaluate(&net, &wrong, &hyper(vec![0.0; 2])).unwrap(), 100.0);
    }

    #[test]
    fn mismatched_algorithm_is_rejected() {
        let mut net = glorot_init(&spec(vec![3, 5], 4, true), 1).unwrap();
        let r = train_minibatch(&mut net, &batch(2, 4, 3), Algorithm::Cvf, &hyper(vec![0.1; 2]), 0.1);
        assert!(matches!(r, Err(Error::RequiresUntied(_))));
    }

    #[test]
    fn report_csv_layout() {
        let report = TrainReport {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_err: 50.0,
                test_err: 60.5,
                skipped: 0,
            }],
            wall_time_s: 1.0,
            checkpoint: None,
        };
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &report).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_err,test_err\n1,50,60.5\n# final epoch=1 train_err=50 test_err=60.5\n"
        );
    }
}
