//! Normalized updates of EP, C-EP and C-VF and their comparison with the
//! BPTT gradients (gradient-descending dynamics).
//!
//! `Δ_s(t)` is paired with `-∇_s(t)` and `Δ_θ(t)` with `-∇_θ(t+1)` for
//! `t = 0 … K-1`; see [`crate::gradients`] for the gradient indexing.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradients::{bptt_gradients, GradientSeries};
use crate::model::{BlockId, Hyperparams, LayeredNetwork, NetworkState, Weights};
use crate::numerics::{cosine, dot};
use crate::phases::{run_free_phase, run_second_phase, Algorithm, SecondPhaseRecord};

#[derive(Debug, Clone)]
pub struct UpdateSeries {
    pub algorithm: Algorithm,
    pub beta: f64,
    pub eta: Vec<f64>,
    /// `Δ_s(0) … Δ_s(K-1)`
    pub state_updates: Vec<NetworkState>,
    /// `Δ_θ(0) … Δ_θ(K-1)`
    pub param_updates: Vec<Weights>,
    /// Blocks with `η = 0` whose updates were recomputed from the states.
    pub fallback_blocks: Vec<BlockId>,
}

impl UpdateSeries {
    pub fn k(&self) -> usize {
        self.state_updates.len()
    }

    pub fn total_param_update(&self) -> Weights {
        let mut total = self.param_updates[0].zeros_like();
        for d in &self.param_updates {
            total.axpy(1.0, d);
        }
        total
    }

    /// Every update multiplied by `c`.
    pub fn scaled(&self, c: f64) -> UpdateSeries {
        let mut out = self.clone();
        for s in &mut out.state_updates {
            s.layers.iter_mut().flatten().for_each(|v| *v *= c);
        }
        for w in &mut out.param_updates {
            w.scale(c);
        }
        out
    }
}

fn state_updates(record: &SecondPhaseRecord) -> Result<Vec<NetworkState>> {
    if record.beta == 0.0 {
        return Err(Error::InvalidHyper("normalized updates need beta != 0".into()));
    }
    let inv = 1.0 / record.network.mode.nudge_gain(record.beta);
    Ok(record
        .states
        .windows(2)
        .map(|w| w[0].scaled_diff(&w[1], inv))
        .collect())
}

/// `Δ^EP(β, t)` from a frozen-weight second phase.
pub fn normalized_updates_ep(record: &SecondPhaseRecord) -> Result<UpdateSeries> {
    let net = &record.network;
    let param_updates = record
        .states
        .windows(2)
        .map(|w| net.contrastive_update(&record.x, &w[0], &w[1], record.beta))
        .collect();
    Ok(UpdateSeries {
        algorithm: Algorithm::Ep,
        beta: record.beta,
        eta: record.eta.clone(),
        state_updates: state_updates(record)?,
        param_updates,
        fallback_blocks: Vec::new(),
    })
}

/// `Δ(β, η, t)` of a continual second phase: parameter increments divided
/// by the block's learning rate. Blocks with `η_n = 0` fall back to the
/// state-based rule and are listed in `fallback_blocks`.
pub fn normalized_updates_continual(record: &SecondPhaseRecord) -> Result<UpdateSeries> {
    let n_hidden = record.network.n_hidden();
    let ids: Vec<BlockId> = record.network.weights.blocks().iter().map(|(id, _)| *id).collect();
    let fallback_blocks: Vec<BlockId> = ids
        .iter()
        .copied()
        .filter(|id| record.eta[id.lr_index(n_hidden)] == 0.0)
        .collect();
    let mut param_updates = Vec::with_capacity(record.states.len() - 1);
    for t in 0..record.states.len() - 1 {
        let fallback = (!fallback_blocks.is_empty()).then(|| {
            let net = record.network_at(t);
            record.algorithm.state_rule(
                &net,
                &record.x,
                &record.states[t],
                &record.states[t + 1],
                record.beta,
            )
        });
        let mut delta = record.params[t].zeros_like();
        let before = record.params[t].blocks();
        let after = record.params[t + 1].blocks();
        for (b, (id, out)) in delta.blocks_mut().into_iter().enumerate() {
            let eta = record.eta[id.lr_index(n_hidden)];
            if eta == 0.0 {
                let src = fallback.as_ref().expect("fallback computed").block(id);
                out.as_mut_slice().copy_from_slice(src.as_slice());
            } else {
                let inv = 1.0 / eta;
                for ((o, a), p) in out
                    .as_mut_slice()
                    .iter_mut()
                    .zip(after[b].1.as_slice())
                    .zip(before[b].1.as_slice())
                {
                    *o = (a - p) * inv;
                }
            }
        }
        param_updates.push(delta);
    }
    Ok(UpdateSeries {
        algorithm: record.algorithm,
        beta: record.beta,
        eta: record.eta.clone(),
        state_updates: state_updates(record)?,
        param_updates,
        fallback_blocks,
    })
}

/// Normalized updates for any record.
pub fn normalized_updates(record: &SecondPhaseRecord) -> Result<UpdateSeries> {
    match record.algorithm {
        Algorithm::Ep => normalized_updates_ep(record),
        Algorithm::Cep | Algorithm::Cvf => normalized_updates_continual(record),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    State,
    Param,
    /// All parameter blocks concatenated.
    AllParams,
}

/// Comparison of one block across the second phase.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub kind: BlockKind,
    /// `cos(Δ(t), -∇(t))`, `None` when either side is zero.
    pub cosine: Vec<Option<f64>>,
    /// `‖Δ(t) + ∇(t)‖² / ‖∇(t)‖²`
    pub rel_mse: Vec<Option<f64>>,
    /// Fraction of components where `sign Δ = sign(-∇)`.
    pub sign_frac: Vec<f64>,
    /// Angle between the summed updates and summed negated gradients.
    pub total_angle_deg: Option<f64>,
    pub total_rel_mse: Option<f64>,
    pub total_sign_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GddReport {
    pub blocks: Vec<BlockReport>,
    /// Angle over all parameters concatenated.
    pub total_angle_deg: Option<f64>,
}

impl GddReport {
    pub fn block(&self, name: &str) -> Option<&BlockReport> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Smallest defined per-step cosine over the given kinds of blocks.
    pub fn min_cosine(&self, kinds: &[BlockKind]) -> Option<f64> {
        self.blocks
            .iter()
            .filter(|b| kinds.contains(&b.kind))
            .flat_map(|b| b.cosine.iter().flatten().copied())
            .reduce(f64::min)
    }

    /// Largest absolute difference over every numeric field.
    pub fn max_abs_diff(&self, other: &GddReport) -> f64 {
        fn opt(a: Option<f64>, b: Option<f64>) -> f64 {
            match (a, b) {
                (Some(x), Some(y)) => (x - y).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            }
        }
        let mut worst = opt(self.total_angle_deg, other.total_angle_deg);
        if self.blocks.len() != other.blocks.len() {
            return f64::INFINITY;
        }
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            for (x, y) in a.cosine.iter().zip(&b.cosine) {
                worst = worst.max(opt(*x, *y));
            }
            for (x, y) in a.rel_mse.iter().zip(&b.rel_mse) {
                worst = worst.max(opt(*x, *y));
            }
            for (x, y) in a.sign_frac.iter().zip(&b.sign_frac) {
                worst = worst.max((x - y).abs());
            }
            worst = worst
                .max(opt(a.total_angle_deg, b.total_angle_deg))
                .max(opt(a.total_rel_mse, b.total_rel_mse))
                .max((a.total_sign_frac - b.total_sign_frac).abs());
        }
        worst
    }
}

fn rel_mse(delta: &[f64], grad: &[f64]) -> Option<f64> {
    let g2 = dot(grad, grad);
    if g2 == 0.0 {
        return None;
    }
    let e: f64 = delta.iter().zip(grad).map(|(d, g)| (d + g) * (d + g)).sum();
    Some(e / g2)
}

fn sign_frac(delta: &[f64], grad: &[f64]) -> f64 {
    if delta.is_empty() {
        return 1.0;
    }
    let agree = delta
        .iter()
        .zip(grad)
        .filter(|(d, g)| sign(**d) == sign(-**g))
        .count();
    agree as f64 / delta.len() as f64
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn compare(name: String, kind: BlockKind, deltas: &[Vec<f64>], grads: &[Vec<f64>]) -> BlockReport {
    let neg: Vec<Vec<f64>> = grads.iter().map(|g| g.iter().map(|v| -v).collect()).collect();
    let cosine_t = deltas.iter().zip(&neg).map(|(d, g)| cosine(d, g)).collect();
    let rel_t = deltas.iter().zip(grads).map(|(d, g)| rel_mse(d, g)).collect();
    let sign_t = deltas.iter().zip(grads).map(|(d, g)| sign_frac(d, g)).collect();
    let len = deltas.first().map_or(0, Vec::len);
    let mut dt = vec![0.0; len];
    let mut gt = vec![0.0; len];
    for (d, g) in deltas.iter().zip(grads) {
        dt.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        gt.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let neg_gt: Vec<f64> = gt.iter().map(|v| -v).collect();
    BlockReport {
        name,
        kind,
        cosine: cosine_t,
        rel_mse: rel_t,
        sign_frac: sign_t,
        total_angle_deg: cosine(&dt, &neg_gt).map(|c| c.acos().to_degrees()),
        total_rel_mse: rel_mse(&dt, &gt),
        total_sign_frac: sign_frac(&dt, &gt),
    }
}

/// Compare normalized updates with negated gradients, per block, per step
/// and in total.
pub fn gdd_report(updates: &UpdateSeries, grads: &GradientSeries) -> Result<GddReport> {
    let k = updates.k();
    if grads.k() < k {
        return Err(Error::TrajectoryTooShort { k, t: grads.k() });
    }
    if k == 0 {
        return Err(Error::InvalidHyper("empty update series".into()));
    }
    let mut blocks = Vec::new();
    let n_layers = updates.state_updates[0].layers.len();
    for n in 0..n_layers {
        let d: Vec<Vec<f64>> = updates.state_updates.iter().map(|s| s.layers[n].clone()).collect();
        let g: Vec<Vec<f64>> = (0..k).map(|t| grads.state_grads[t].layers[n].clone()).collect();
        blocks.push(compare(format!("s{n}"), BlockKind::State, &d, &g));
    }
    let n_hidden = n_layers - 1;
    let ids: Vec<BlockId> = updates.param_updates[0].blocks().iter().map(|(id, _)| *id).collect();
    if grads.param_grads[0].blocks().len() != ids.len() {
        return Err(Error::Dimension {
            context: "gdd_report parameter blocks",
            expected: ids.len(),
            found: grads.param_grads[0].blocks().len(),
        });
    }
    for id in &ids {
        let d: Vec<Vec<f64>> = updates
            .param_updates
            .iter()
            .map(|w| w.block(*id).as_slice().to_vec())
            .collect();
        let g: Vec<Vec<f64>> = (0..k)
            .map(|t| grads.param_grads[t].block(*id).as_slice().to_vec())
            .collect();
        blocks.push(compare(id.name(n_hidden), BlockKind::Param, &d, &g));
    }
    let d: Vec<Vec<f64>> = updates.param_updates.iter().map(Weights::flatten).collect();
    let g: Vec<Vec<f64>> = grads.param_grads[..k].iter().map(Weights::flatten).collect();
    let all = compare("all".to_string(), BlockKind::AllParams, &d, &g);
    let total_angle_deg = all.total_angle_deg;
    blocks.push(all);
    Ok(GddReport {
        blocks,
        total_angle_deg,
    })
}

/// Mean and standard deviation of several reports with identical layout.
/// Undefined entries are left out of the statistics.
pub fn aggregate(reports: &[GddReport]) -> (GddReport, GddReport) {
    fn stats(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>) {
        let v: Vec<f64> = values.flatten().collect();
        if v.is_empty() {
            return (None, None);
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        (Some(mean), Some(var.sqrt()))
    }
    let first = &reports[0];
    let mut mean = first.clone();
    let mut std = first.clone();
    let (m, s) = stats(reports.iter().map(|r| r.total_angle_deg));
    mean.total_angle_deg = m;
    std.total_angle_deg = s;
    for b in 0..first.blocks.len() {
        let col = |f: &dyn Fn(&BlockReport) -> Option<f64>| stats(reports.iter().map(|r| f(&r.blocks[b])));
        for t in 0..first.blocks[b].cosine.len() {
            let (m, s) = col(&|r| r.cosine[t]);
            mean.blocks[b].cosine[t] = m;
            std.blocks[b].cosine[t] = s;
            let (m, s) = col(&|r| r.rel_mse[t]);
            mean.blocks[b].rel_mse[t] = m;
            std.blocks[b].rel_mse[t] = s;
            let (m, s) = col(&|r| Some(r.sign_frac[t]));
            mean.blocks[b].sign_frac[t] = m.unwrap_or(0.0);
            std.blocks[b].sign_frac[t] = s.unwrap_or(0.0);
        }
        let (m, s) = col(&|r| r.total_angle_deg);
        mean.blocks[b].total_angle_deg = m;
        std.blocks[b].total_angle_deg = s;
        let (m, s) = col(&|r| r.total_rel_mse);
        mean.blocks[b].total_rel_mse = m;
        std.blocks[b].total_rel_mse = s;
        let (m, s) = col(&|r| Some(r.total_sign_frac));
        mean.blocks[b].total_sign_frac = m.unwrap_or(0.0);
        std.blocks[b].total_sign_frac = s.unwrap_or(0.0);
    }
    (mean, std)
}

/// One `(β, η)` point of a sweep, averaged over samples.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub algorithm: Algorithm,
    pub beta: f64,
    pub eta: Vec<f64>,
    pub n_samples: usize,
    pub mean: GddReport,
    pub std: GddReport,
}

/// Everything needed to compare one sample at several `(β, η)` points.
fn sample_reports(
    algorithm: Algorithm,
    net: &LayeredNetwork,
    x: &[f64],
    y: &[f64],
    hyper: &Hyperparams,
    grid: &[(f64, Vec<f64>)],
) -> Result<Vec<GddReport>> {
    let trajectory = run_free_phase(net, x, hyper)?;
    let grads = bptt_gradients(net, x, &trajectory, y, hyper.k_nudge)?;
    grid.iter()
        .map(|(beta, eta)| {
            let h = Hyperparams {
                beta: *beta,
                lr: eta.clone(),
                ..hyper.clone()
            };
            let record = run_second_phase(algorithm, net, x, trajectory.steady_state(), y, &h)?;
            gdd_report(&normalized_updates(&record)?, &grads)
        })
        .collect()
}

/// For every `(β, η)` in the product of `betas` and `etas`: free phase,
/// BPTT over `K` steps, second phase, report; averaged over `samples`.
pub fn gdd_sweep(
    algorithm: Algorithm,
    net: &LayeredNetwork,
    samples: &[(Vec<f64>, Vec<f64>)],
    hyper: &Hyperparams,
    betas: &[f64],
    etas: &[Vec<f64>],
) -> Result<Vec<SweepRow>> {
    if samples.is_empty() {
        return Err(Error::InvalidHyper("gdd sweep needs at least one sample".into()));
    }
    if algorithm.needs_untied() == net.tied() {
        return Err(if net.tied() {
            Error::RequiresUntied("C-VF")
        } else {
            Error::RequiresTied(if algorithm == Algorithm::Ep { "EP" } else { "C-EP" })
        });
    }
    let grid: Vec<(f64, Vec<f64>)> = betas
        .iter()
        .flat_map(|&b| etas.iter().map(move |e| (b, e.clone())))
        .collect();
    let per_sample: Vec<Vec<GddReport>> = samples
        .par_iter()
        .map(|(x, y)| sample_reports(algorithm, net, x, y, hyper, &grid))
        .collect::<Result<_>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, (beta, eta))| {
            let reports: Vec<GddReport> = per_sample.iter().map(|r| r[i].clone()).collect();
            let (mean, std) = aggregate(&reports);
            SweepRow {
                algorithm,
                beta: *beta,
                eta: eta.clone(),
                n_samples: samples.len(),
                mean,
                std,
            }
        })
        .collect())
}

/// Column order of the sweep CSV.
pub const CSV_HEADER: &str = "algo,mode,layers,beta,eta,t,block,cosine,rel_mse,sign_frac";

/// Marker for undefined cosines, angles and relative errors.
pub const UNDEFINED: &str = "undef";

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

/// Learning rates as one field: a single number when uniform.
pub fn eta_label(eta: &[f64]) -> String {
    if eta.windows(2).all(|w| w[0] == w[1]) {
        eta.first().map_or_else(String::new, |e| e.to_string())
    } else {
        eta.iter().map(f64::to_string).collect::<Vec<_>>().join("/")
    }
}

/// Write sweep rows. Summary rows carry `t = -1` and the total angle in
/// degrees in the `cosine` column.
pub fn write_sweep_csv<W: Write>(mut w: W, net: &LayeredNetwork, rows: &[SweepRow]) -> io::Result<()> {
    writeln!(
        w,
        "# rows with t=-1 are totals over the second phase: cosine column holds the angle in degrees \
         between summed updates and summed negated gradients; values are means over samples"
    )?;
    writeln!(w, "{CSV_HEADER}")?;
    let mode = net.mode.name();
    let layers = net.topology_label();
    for row in rows {
        let prefix = format!(
            "{},{},{},{},{}",
            row.algorithm,
            mode,
            layers,
            row.beta,
            eta_label(&row.eta)
        );
        for b in &row.mean.blocks {
            for t in 0..b.cosine.len() {
                writeln!(
                    w,
                    "{prefix},{t},{},{},{},{}",
                    b.name,
                    opt_field(b.cosine[t]),
                    opt_field(b.rel_mse[t]),
                    b.sign_frac[t]
                )?;
            }
            writeln!(
                w,
                "{prefix},-1,{},{},{},{}",
                b.name,
                opt_field(b.total_angle_deg),
                opt_field(b.total_rel_mse),
                b.total_sign_frac
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::{rbp_gradients, GradientAlgorithm};
    use crate::model::Mode;
    use crate::numerics::{ActivationKind, Matrix};
    use crate::phases::{run_nudged_cep, run_nudged_cvf, run_nudged_ep};
    use crate::toy;
    use rand::{Rng, SeedableRng};

    fn hyper(t: usize, k: usize, beta: f64, lr: Vec<f64>) -> Hyperparams {
        Hyperparams {
            t_free: t,
            k_nudge: k,
            beta,
            lr,
            random_beta: false,
            lr_tiny_scale: None,
            convergence_tol: 1e-12,
        }
    }

    fn random_net(seed: u64, activation: ActivationKind, mode: Mode) -> LayeredNetwork {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.gen_range(-0.4..0.4));
        LayeredNetwork::new(
            vec![3, 6, 5],
            8,
            activation,
            mode,
            Weights {
                forward: vec![m(3, 6), m(6, 5)],
                input: m(5, 8),
                backward: None,
            },
        )
        .unwrap()
    }

    fn sample() -> (Vec<f64>, Vec<f64>) {
        ((0..8).map(|i| (i as f64 * 0.7).sin().abs()).collect(), vec![0.0, 1.0, 0.0])
    }

    fn mirror(grads: &GradientSeries, k: usize, sign: f64) -> UpdateSeries {
        UpdateSeries {
            algorithm: Algorithm::Ep,
            beta: 1.0,
            eta: vec![0.0; 3],
            state_updates: grads.state_grads[..k]
                .iter()
                .map(|s| NetworkState {
                    layers: s
                        .layers
                        .iter()
                        .map(|l| l.iter().map(|v| sign * v).collect())
                        .collect(),
                })
                .collect(),
            param_updates: grads.param_grads[..k]
                .iter()
                .map(|w| {
                    let mut w = w.clone();
                    w.scale(sign);
                    w
                })
                .collect(),
            fallback_blocks: Vec::new(),
        }
    }

    fn grads_for(net: &LayeredNetwork) -> GradientSeries {
        let (x, y) = sample();
        let traj = run_free_phase(net, &x, &hyper(300, 6, 0.1, vec![0.0; 3])).unwrap();
        bptt_gradients(net, &x, &traj, &y, 6).unwrap()
    }

    #[test]
    fn exact_negation_is_perfect() {
        let net = random_net(1, ActivationKind::Tanh, Mode::DiscreteTime);
        let grads = grads_for(&net);
        let report = gdd_report(&mirror(&grads, 6, -1.0), &grads).unwrap();
        assert!(report.total_angle_deg.unwrap() < 1e-5);
        for b in &report.blocks {
            for c in b.cosine.iter().flatten() {
                assert!((c - 1.0).abs() < 1e-12);
            }
        }
        let opposite = gdd_report(&mirror(&grads, 6, 1.0), &grads).unwrap();
        assert!((opposite.total_angle_deg.unwrap() - 180.0).abs() < 1e-5);
    }

    #[test]
    fn angle_is_scale_invariant() {
        let net = random_net(2, ActivationKind::Tanh, Mode::DiscreteTime);
        let (x, y) = sample();
        let h = hyper(300, 6, 0.05, vec![0.0; 3]);
        let traj = run_free_phase(&net, &x, &h).unwrap();
        let grads = bptt_gradients(&net, &x, &traj, &y, 6).unwrap();
        let rec = run_nudged_ep(&net, &x, traj.steady_state(), &y, &h).unwrap();
        let upd = normalized_updates_ep(&rec).unwrap();
        let base = gdd_report(&upd, &grads).unwrap().total_angle_deg.unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let a = gdd_report(&upd.scaled(c), &grads).unwrap().total_angle_deg.unwrap();
            assert!((a - base).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_updates_are_undefined() {
        let net = random_net(3, ActivationKind::Tanh, Mode::DiscreteTime);
        let grads = grads_for(&net);
        let report = gdd_report(&mirror(&grads, 6, 0.0), &grads).unwrap();
        assert!(report.total_angle_deg.is_none());
        assert!(report.blocks.iter().all(|b| b.cosine.iter().all(Option::is_none)));
    }

    #[test]
    fn ep_updates_telescope() {
        let net = random_net(4, ActivationKind::Tanh, Mode::DiscreteTime);
        let (x, y) = sample();
        let h = hyper(300, 10, 0.05, vec![0.0; 3]);
        let traj = run_free_phase(&net, &x, &h).unwrap();
        let rec = run_nudged_ep(&net, &x, traj.steady_state(), &y, &h).unwrap();
        let total = normalized_updates_ep(&rec).unwrap().total_param_update();
        let mut expect = net.phi_param_grad(&x, &rec.states[10]).unwrap();
        expect.axpy(-1.0, &net.phi_param_grad(&x, &rec.states[0]).unwrap());
        expect.scale(1.0 / h.beta);
        let scale = expect.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(total.max_abs_diff(&expect) <= 1e-12 * scale);
    }

    #[test]
    fn constant_states_give_zero_updates() {
        let net = random_net(5, ActivationKind::Tanh, Mode::DiscreteTime);
        let (x, _) = sample();
        let h = hyper(400, 5, 0.05, vec![0.0; 3]);
        let traj = run_free_phase(&net, &x, &h).unwrap();
        let y = traj.steady_state().output().to_vec();
        let rec = run_nudged_ep(&net, &x, traj.steady_state(), &y, &h).unwrap();
        let upd = normalized_updates_ep(&rec).unwrap();
        assert!(upd.param_updates.iter().all(|w| w.flatten().iter().all(|v| v.abs() < 1e-12)));
        assert!(upd.state_updates.iter().all(|s| s.flatten().iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn continual_increments_match_eta_times_update() {
        let net = random_net(6, ActivationKind::Tanh, Mode::DiscreteTime);
        let (x, y) = sample();
        let h = hyper(300, 8, 0.05, vec![3e-3, 2e-3, 1e-3]);
        let traj = run_free_phase(&net, &x, &h).unwrap();
        for rec in [
            run_nudged_cep(&net, &x, traj.steady_state(), &y, &h).unwrap(),
            run_nudged_cvf(&net.untie(), &x, traj.steady_state(), &y, &h).unwrap(),
        ] {
            let upd = normalized_updates_continual(&rec).unwrap();
            assert!(upd.fallback_blocks.is_empty());
            let mut sum = rec.params[0].zeros_like();
            for t in 0..8 {
                let mut step = upd.param_updates[t].clone();
                step = {
                    let mut s = step.zeros_like();
                    s.axpy_per_block(&h.lr, &upd.param_updates[t]);
                    s
                };
                let mut inc = (*rec.params[t + 1]).clone();
                inc.axpy(-1.0, &rec.params[t]);
                assert!(step.max_abs_diff(&inc) <= 1e-12 * inc.flatten().iter().fold(1e-300f64, |m, v| m.max(v.abs())));
                sum.axpy(1.0, &step);
            }
            let mut drift = (*rec.params[8]).clone();
            drift.axpy(-1.0, &rec.params[0]);
            assert!(sum.max_abs_diff(&drift) < 1e-15);
        }
    }

    #[test]
    fn cvf_update_by_hand() {
        // Two units, one per layer, untied.
        let net = LayeredNetwork::new(
            vec![1, 1],
            1,
            ActivationKind::Tanh,
            Mode::DiscreteTime,
            Weights {
                forward: vec![Matrix::new(1, 1, vec![0.5]).unwrap()],
                input: Matrix::new(1, 1, vec![0.8]).unwrap(),
                backward: Some(vec![Matrix::new(1, 1, vec![0.5]).unwrap()]),
            },
        )
        .unwrap();
        let from = NetworkState { layers: vec![vec![0.2], vec![0.6]] };
        let to = NetworkState { layers: vec![vec![0.3], vec![0.5]] };
        let d = net.vector_field_update(&[1.0], &from, &to, 0.1);
        assert!((d.forward[0].get(0, 0) - (0.1 / 0.1) * 0.6).abs() < 1e-12);
        assert!((d.backward.as_ref().unwrap()[0].get(0, 0) - (-0.1 / 0.1) * 0.2).abs() < 1e-12);
        assert!((d.input.get(0, 0) - (-0.1 / 0.1) * 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_cep_report_equals_ep_report() {
        let net = random_net(7, ActivationKind::Tanh, Mode::DiscreteTime);
        let (x, y) = sample();
        let h = hyper(300, 6, 0.01, vec![0.0; 3]);
        let traj = run_free_phase(&net, &x, &h).unwrap();
        let grads = bptt_gradients(&net, &x, &traj, &y, 6).unwrap();
        let ep = run_nudged_ep(&net, &x, traj.steady_state(), &y, &h).unwrap();
        let cep = run_nudged_cep(&net, &x, traj.steady_state(), &y, &h).unwrap();
        let a = gdd_report(&normalized_updates(&ep).unwrap(), &grads).unwrap();
        let cep_upd = normalized_updates(&cep).unwrap();
        assert_eq!(cep_upd.fallback_blocks.len(), 3);
        let b = gdd_report(&cep_upd, &grads).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-14);
    }

    #[test]
    fn toy_embed_total_angle_is_small() {
        let (net, x, y) = toy::embed(1.0);
        let h = hyper(100, 20, toy::embedded_beta(0.01), vec![1e-5]);
        let traj = run_free_phase(&net, &x, &h).unwrap();
        let grads = bptt_gradients(&net, &x, &traj, &y, 20).unwrap();
        let rec = run_nudged_cep(&net, &x, traj.steady_state(), &y, &h).unwrap();
        let upd = normalized_updates(&rec).unwrap();
        // First continual updates of the toy.
        assert!((upd.state_updates[0].layers[0][0] + 1.0).abs() < 1e-9);
        assert!((upd.param_updates[0].input.get(0, 0) + 0.5).abs() < 1e-6);
        let report = gdd_report(&upd, &grads).unwrap();
        assert!(report.total_angle_deg.unwrap() < 1.0);
    }

    #[test]
    fn ep_approaches_rbp_as_beta_shrinks() {
        // Linear real-time units: the transition is exactly ∂Φ/∂s.
        let mut net = random_net(8, ActivationKind::Identity, Mode::RealTime { epsilon: 0.2 });
        // Keep the linear dynamics contracting.
        net.weights.scale(0.4);
        let (x, y) = sample();
        let h0 = hyper(2000, 15, 0.08, vec![0.0; 3]);
        let traj = run_free_phase(&net, &x, &h0).unwrap();
        assert!(traj.final_residual < 1e-12, "{}", traj.final_residual);
        let rbp = rbp_gradients(&net, &x, traj.steady_state(), &y, 15, 1e-11).unwrap();
        assert_eq!(rbp.algorithm, GradientAlgorithm::Rbp);
        let mut prev = f64::INFINITY;
        for beta in [0.08, 0.04, 0.02, 0.01] {
            let h = Hyperparams { beta, ..h0.clone() };
            let rec = run_nudged_ep(&net, &x, traj.steady_state(), &y, &h).unwrap();
            let upd = normalized_updates_ep(&rec).unwrap();
            let mut err: f64 = 0.0;
            for t in 0..15 {
                let mut d = upd.param_updates[t].clone();
                d.axpy(1.0, rbp.param_grad(t + 1));
                err = err.max(d.flatten().iter().fold(0.0, |m, v| m.max(v.abs())));
                let (du, g) = (upd.state_updates[t].flatten(), rbp.state_grads[t].flatten());
                err = du.iter().zip(&g).fold(err, |m, (a, b)| m.max((a + b).abs()));
            }
            assert!(err < 0.75 * prev, "β={beta}: {err:e} vs {prev:e}");
            prev = err;
        }
    }

    #[test]
    fn csv_layout() {
        let net = random_net(9, ActivationKind::Tanh, Mode::DiscreteTime);
        let (x, y) = sample();
        let h = hyper(200, 4, 0.01, vec![0.0; 3]);
        let rows = gdd_sweep(Algorithm::Ep, &net, &[(x, y)], &h, &[0.01], &[vec![0.0; 3]]).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &net, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with('#'));
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&first[..7], &["ep", "discrete", "8-5-6-3", "0.01", "0", "0", "s0"]);
        assert!(text.lines().any(|l| l.contains(",-1,all,")));
    }
}
