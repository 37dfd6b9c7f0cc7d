//! First (free) phase and the three second-phase variants.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Hyperparams, LayeredNetwork, NetworkState, Nudge, Weights};

/// Learning algorithm driving the second phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Weights frozen during the second phase, one global update afterwards.
    Ep,
    /// Continual updates, tied weights.
    Cep,
    /// Continual pre/post-synaptic updates, untied weights.
    Cvf,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ep => "ep",
            Algorithm::Cep => "cep",
            Algorithm::Cvf => "cvf",
        }
    }

    pub fn needs_untied(self) -> bool {
        self == Algorithm::Cvf
    }

    /// Per-step normalized parameter update computed from two states.
    pub fn state_rule(
        self,
        net: &LayeredNetwork,
        x: &[f64],
        from: &NetworkState,
        to: &NetworkState,
        beta: f64,
    ) -> Weights {
        match self {
            Algorithm::Ep | Algorithm::Cep => net.contrastive_update(x, from, to, beta),
            Algorithm::Cvf => net.vector_field_update(x, from, to, beta),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "ep" => Ok(Algorithm::Ep),
            "cep" => Ok(Algorithm::Cep),
            "cvf" => Ok(Algorithm::Cvf),
            _ => Err(Error::Config(format!("unknown algorithm `{s}`"))),
        }
    }
}

/// States `s_0 … s_T` of the free phase.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<NetworkState>,
    pub converged: bool,
    pub final_residual: f64,
}

impl Trajectory {
    /// `s_* = s_T`
    pub fn steady_state(&self) -> &NetworkState {
        self.states.last().expect("trajectory is never empty")
    }

    /// Number of transitions `T`.
    pub fn len_steps(&self) -> usize {
        self.states.len() - 1
    }
}

/// Everything produced by one second phase.
#[derive(Debug, Clone)]
pub struct SecondPhaseRecord {
    pub algorithm: Algorithm,
    /// Network at the start of the phase (`θ_0`).
    pub network: LayeredNetwork,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `s_0^{β,η} … s_K^{β,η}`
    pub states: Vec<NetworkState>,
    /// `θ_0 … θ_K`; shared pointers when the weights do not move.
    pub params: Vec<Arc<Weights>>,
    pub beta: f64,
    pub eta: Vec<f64>,
}

impl SecondPhaseRecord {
    /// Network carrying `θ_t`.
    pub fn network_at(&self, t: usize) -> LayeredNetwork {
        let mut net = self.network.clone();
        net.weights = (*self.params[t]).clone();
        net
    }
}

/// Run `T` synchronous steps from `s_0 = 0` and keep every state.
pub fn run_free_phase(net: &LayeredNetwork, x: &[f64], hyper: &Hyperparams) -> Result<Trajectory> {
    net.check_input(x)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input"));
    }
    let drive = net.input_drive(x);
    let mut states = Vec::with_capacity(hyper.t_free + 1);
    states.push(net.zero_state());
    for t in 0..hyper.t_free {
        let next = net.step_with_drive(&drive, &states[t], None);
        if !next.is_finite() {
            return Err(Error::Divergence {
                phase: "free phase",
                step: t + 1,
            });
        }
        states.push(next);
    }
    let final_residual = if states.len() > 1 {
        states[states.len() - 1].distance(&states[states.len() - 2])
    } else {
        f64::INFINITY
    };
    let converged = final_residual < hyper.convergence_tol;
    if !converged {
        log::warn!(
            "free phase did not converge: residual {final_residual:e} after {} steps",
            hyper.t_free
        );
    }
    Ok(Trajectory {
        states,
        converged,
        final_residual,
    })
}

/// Free steady state only, without storing the trajectory.
pub fn relax(net: &LayeredNetwork, x: &[f64], steps: usize) -> Result<(NetworkState, f64)> {
    net.check_input(x)?;
    let drive = net.input_drive(x);
    let mut s = net.zero_state();
    let mut residual = f64::INFINITY;
    for t in 0..steps {
        let next = net.step_with_drive(&drive, &s, None);
        if !next.is_finite() {
            return Err(Error::Divergence {
                phase: "free phase",
                step: t + 1,
            });
        }
        residual = next.distance(&s);
        s = next;
    }
    Ok((s, residual))
}

fn check_second_phase(
    net: &LayeredNetwork,
    x: &[f64],
    s_star: &NetworkState,
    y: &[f64],
) -> Result<()> {
    net.check_input(x)?;
    net.check_state(s_star)?;
    net.check_target(y)
}

/// Second phase of EP: `K` nudged steps with frozen weights.
pub fn run_nudged_ep(
    net: &LayeredNetwork,
    x: &[f64],
    s_star: &NetworkState,
    y: &[f64],
    hyper: &Hyperparams,
) -> Result<SecondPhaseRecord> {
    if !net.tied() {
        return Err(Error::RequiresTied("EP"));
    }
    check_second_phase(net, x, s_star, y)?;
    let drive = net.input_drive(x);
    let nudge = Nudge {
        target: y,
        beta: hyper.beta,
    };
    let mut states = Vec::with_capacity(hyper.k_nudge + 1);
    states.push(s_star.clone());
    for t in 0..hyper.k_nudge {
        let next = net.step_with_drive(&drive, &states[t], Some(nudge));
        if !next.is_finite() {
            return Err(Error::Divergence {
                phase: "EP second phase",
                step: t + 1,
            });
        }
        states.push(next);
    }
    let theta = Arc::new(net.weights.clone());
    Ok(SecondPhaseRecord {
        algorithm: Algorithm::Ep,
        network: net.clone(),
        x: x.to_vec(),
        y: y.to_vec(),
        states,
        params: vec![theta; hyper.k_nudge + 1],
        beta: hyper.beta,
        eta: hyper.lr.clone(),
    })
}

/// Continual second phase: state step with `θ_t`, then
/// `θ_{t+1} = θ_t + η · Δ_θ(s_t, s_{t+1}, θ_t)` blockwise.
fn run_continual(
    algorithm: Algorithm,
    net: &LayeredNetwork,
    x: &[f64],
    s_star: &NetworkState,
    y: &[f64],
    hyper: &Hyperparams,
) -> Result<SecondPhaseRecord> {
    check_second_phase(net, x, s_star, y)?;
    if hyper.lr.len() != net.n_hidden() + 1 {
        return Err(Error::InvalidHyper(format!(
            "expected {} learning rates, got {}",
            net.n_hidden() + 1,
            hyper.lr.len()
        )));
    }
    let phase = match algorithm {
        Algorithm::Cvf => "C-VF second phase",
        _ => "C-EP second phase",
    };
    let frozen = hyper.lr.iter().all(|&e| e == 0.0);
    let nudge = Nudge {
        target: y,
        beta: hyper.beta,
    };
    let mut current = net.clone();
    let mut drive = current.input_drive(x);
    let mut states = Vec::with_capacity(hyper.k_nudge + 1);
    let mut params = Vec::with_capacity(hyper.k_nudge + 1);
    states.push(s_star.clone());
    params.push(Arc::new(current.weights.clone()));
    for t in 0..hyper.k_nudge {
        let next = current.step_with_drive(&drive, &states[t], Some(nudge));
        if !next.is_finite() {
            return Err(Error::Divergence { phase, step: t + 1 });
        }
        if !frozen {
            let delta = algorithm.state_rule(&current, x, &states[t], &next, hyper.beta);
            current.weights.axpy_per_block(&hyper.lr, &delta);
            if !current.weights.is_finite() {
                return Err(Error::Divergence { phase, step: t + 1 });
            }
            drive = current.input_drive(x);
            params.push(Arc::new(current.weights.clone()));
        } else {
            params.push(Arc::clone(&params[0]));
        }
        states.push(next);
    }
    Ok(SecondPhaseRecord {
        algorithm,
        network: net.clone(),
        x: x.to_vec(),
        y: y.to_vec(),
        states,
        params,
        beta: hyper.beta,
        eta: hyper.lr.clone(),
    })
}

/// Second phase of C-EP (tied weights).
pub fn run_nudged_cep(
    net: &LayeredNetwork,
    x: &[f64],
    s_star: &NetworkState,
    y: &[f64],
    hyper: &Hyperparams,
) -> Result<SecondPhaseRecord> {
    if !net.tied() {
        return Err(Error::RequiresTied("C-EP"));
    }
    run_continual(Algorithm::Cep, net, x, s_star, y, hyper)
}

/// Second phase of C-VF (untied weights).
pub fn run_nudged_cvf(
    net: &LayeredNetwork,
    x: &[f64],
    s_star: &NetworkState,
    y: &[f64],
    hyper: &Hyperparams,
) -> Result<SecondPhaseRecord> {
    if net.tied() {
        return Err(Error::RequiresUntied("C-VF"));
    }
    run_continual(Algorithm::Cvf, net, x, s_star, y, hyper)
}

pub fn run_second_phase(
    algorithm: Algorithm,
    net: &LayeredNetwork,
    x: &[f64],
    s_star: &NetworkState,
    y: &[f64],
    hyper: &Hyperparams,
) -> Result<SecondPhaseRecord> {
    match algorithm {
        Algorithm::Ep => run_nudged_ep(net, x, s_star, y, hyper),
        Algorithm::Cep => run_nudged_cep(net, x, s_star, y, hyper),
        Algorithm::Cvf => run_nudged_cvf(net, x, s_star, y, hyper),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use crate::numerics::{ActivationKind, Matrix};
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
            convergence_tol: 1e-10,
        }
    }

    fn random_net(seed: u64) -> LayeredNetwork {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.gen_range(-0.4..0.4));
        LayeredNetwork::new(
            vec![3, 5],
            4,
            ActivationKind::Tanh,
            Mode::DiscreteTime,
            Weights {
                forward: vec![m(3, 5)],
                input: m(5, 4),
                backward: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_network_converges_immediately() {
        let mut net = random_net(1);
        net.weights = net.weights.zeros_like();
        let traj = run_free_phase(&net, &[0.0; 4], &hyper(5, 1, 0.1, vec![0.0; 2])).unwrap();
        assert_eq!(traj.states.len(), 6);
        assert!(traj.converged);
        assert!(traj.states.iter().all(|s| s.flatten().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn toy_free_phase_halves_the_gap() {
        let (net, x, _) = toy::embed(1.0);
        let traj = run_free_phase(&net, &x, &hyper(10, 1, 0.2, vec![0.0])).unwrap();
        for (t, s) in traj.states.iter().enumerate() {
            let expect = 1.0 - 0.5f64.powi(t as i32);
            assert!((s.layers[0][0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn toy_second_phase_first_steps() {
        let (net, x, y) = toy::embed(1.0);
        let s_star = crate::model::NetworkState {
            layers: vec![vec![1.0]],
        };
        let h = hyper(1, 1, toy::embedded_beta(0.1), vec![0.01]);
        let ep = run_nudged_ep(&net, &x, &s_star, &y, &h).unwrap();
        assert!((ep.states[1].layers[0][0] - 0.9).abs() < 1e-15);
        let cep = run_nudged_cep(&net, &x, &s_star, &y, &h).unwrap();
        assert!((cep.states[1].layers[0][0] - 0.9).abs() < 1e-15);
        assert!((cep.params[1].input.get(0, 0) - 0.995).abs() < 1e-15);
    }

    #[test]
    fn no_nudge_keeps_steady_state() {
        let net = random_net(2);
        let x = [0.2, 0.9, 0.1, 0.5];
        let traj = run_free_phase(&net, &x, &hyper(200, 5, 0.1, vec![0.0; 2])).unwrap();
        let s_star = traj.steady_state();
        let y_eq = s_star.output().to_vec();
        for beta in [0.0, 0.3, -0.3] {
            let rec = run_nudged_ep(&net, &x, s_star, &y_eq, &hyper(200, 5, beta, vec![0.0; 2]))
                .unwrap();
            for s in &rec.states {
                assert!(s.max_abs_diff(s_star) < 1e-14);
            }
        }
        let y = [1.0, 0.0, 0.0];
        let rec = run_nudged_ep(&net, &x, s_star, &y, &hyper(200, 5, 0.0, vec![0.0; 2])).unwrap();
        for s in &rec.states {
            assert!(s.max_abs_diff(s_star) < 1e-14);
        }
    }

    #[test]
    fn frozen_cep_equals_ep() {
        let net = random_net(3);
        let x = [0.7, 0.1, 0.3, 0.0];
        let y = [0.0, 1.0, 0.0];
        let h = hyper(200, 8, 0.05, vec![0.0; 2]);
        let s_star = run_free_phase(&net, &x, &h).unwrap().steady_state().clone();
        let ep = run_nudged_ep(&net, &x, &s_star, &y, &h).unwrap();
        let cep = run_nudged_cep(&net, &x, &s_star, &y, &h).unwrap();
        assert_eq!(ep.states, cep.states);
        assert!(cep.params.iter().all(|p| **p == net.weights));
        assert!(ep.params.iter().all(|p| Arc::ptr_eq(p, &ep.params[0])));
    }

    #[test]
    fn cvf_with_symmetric_frozen_weights_matches_ep() {
        let net = random_net(4);
        let untied = net.untie();
        let x = [0.4, 0.4, 0.0, 1.0];
        let y = [1.0, 0.0, 0.0];
        let h = hyper(200, 8, 0.05, vec![0.0; 2]);
        let s_star = run_free_phase(&net, &x, &h).unwrap().steady_state().clone();
        let ep = run_nudged_ep(&net, &x, &s_star, &y, &h).unwrap();
        let cvf = run_nudged_cvf(&untied, &x, &s_star, &y, &h).unwrap();
        assert_eq!(ep.states, cvf.states);
    }

    #[test]
    fn tie_requirements() {
        let net = random_net(5);
        let s = net.zero_state();
        let h = hyper(1, 1, 0.1, vec![0.0; 2]);
        assert!(run_nudged_cvf(&net, &[0.0; 4], &s, &[0.0; 3], &h).is_err());
        assert!(run_nudged_ep(&net.untie(), &[0.0; 4], &s, &[0.0; 3], &h).is_err());
        assert!(run_nudged_cep(&net.untie(), &[0.0; 4], &s, &[0.0; 3], &h).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut net = random_net(6);
        net.activation = ActivationKind::Identity;
        net.mode = Mode::RealTime { epsilon: 1.0 };
        for m in net.weights.forward.iter_mut() {
            m.scale(1e3);
        }
        net.weights.input.scale(1e3);
        let err = run_free_phase(&net, &[1.0; 4], &hyper(400, 1, 0.1, vec![0.0; 2])).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn algorithm_parsing() {
        assert_eq!("C-EP".parse::<Algorithm>().unwrap(), Algorithm::Cep);
        assert_eq!("cvf".parse::<Algorithm>().unwrap(), Algorithm::Cvf);
        assert!("bptt".parse::<Algorithm>().is_err());
    }
}
