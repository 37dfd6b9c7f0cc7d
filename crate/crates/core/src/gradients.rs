//! Gradients of the loss by backpropagation through time and by recurrent
//! backpropagation, plus finite-difference oracles for both.
//!
//! Indexing: `state_grads[t]` is `∇_s(t)` for `t = 0 … K`, and
//! `param_grads[t - 1]` is `∇_θ(t)` for `t = 1 … K`, where
//!
//! ```text
//! ∇_s(0) = ∂ℓ/∂s(s_T, y)
//! ∇_s(t) = ∂F/∂s(s_{T-t})ᵀ · ∇_s(t-1)
//! ∇_θ(t) = ∂F/∂θ(s_{T-t})ᵀ · ∇_s(t-1)
//! ```
//!
//! The Jacobians are those of the actual transition, `σ′` included.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{loss, loss_state_grad, LayeredNetwork, Mode, NetworkState, Weights};
use crate::phases::{relax, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientAlgorithm {
    Bptt,
    Rbp,
}

#[derive(Debug, Clone)]
pub struct GradientSeries {
    pub algorithm: GradientAlgorithm,
    /// `∇_s(0) … ∇_s(K)`
    pub state_grads: Vec<NetworkState>,
    /// `∇_θ(1) … ∇_θ(K)`
    pub param_grads: Vec<Weights>,
}

impl GradientSeries {
    pub fn k(&self) -> usize {
        self.param_grads.len()
    }

    /// `∇_θ(t)` for `t ≥ 1`.
    pub fn param_grad(&self, t: usize) -> &Weights {
        &self.param_grads[t - 1]
    }

    /// `Σ_{t=1}^{K} ∇_θ(t)`
    pub fn total_param_grad(&self) -> Weights {
        let mut total = self.param_grads[0].zeros_like();
        for g in &self.param_grads {
            total.axpy(1.0, g);
        }
        total
    }
}

/// Local slope information of the transition at one state.
struct Linearization {
    /// `σ′(a^n)` in discrete time, `σ′(s^n)` in real time.
    slope: Vec<Vec<f64>>,
    /// Presynaptic signals `p(s^n)`.
    pre: Vec<Vec<f64>>,
}

fn linearize(net: &LayeredNetwork, drive: &[f64], s: &NetworkState) -> Linearization {
    let pre: Vec<Vec<f64>> = s.layers.iter().map(|l| net.presynaptic(l).into_owned()).collect();
    let slope = match net.mode {
        Mode::DiscreteTime => net
            .couplings(drive, s)
            .into_iter()
            .map(|a| a.into_iter().map(|v| net.activation.derivative(v)).collect())
            .collect(),
        Mode::RealTime { .. } => s
            .layers
            .iter()
            .map(|l| net.presynaptic_derivative(l).expect("real time"))
            .collect(),
    };
    Linearization { slope, pre }
}

/// `(∂F/∂s)ᵀ g` and optionally `(∂F/∂θ)ᵀ g` at a linearization point.
fn vjp(
    net: &LayeredNetwork,
    lin: &Linearization,
    x_pre: &[f64],
    g: &NetworkState,
    with_params: bool,
) -> (NetworkState, Option<Weights>) {
    let n_hidden = net.n_hidden();
    let (leak, delta): (f64, Vec<Vec<f64>>) = match net.mode {
        Mode::DiscreteTime => (
            0.0,
            g.layers
                .iter()
                .zip(&lin.slope)
                .map(|(gl, sl)| gl.iter().zip(sl).map(|(a, b)| a * b).collect())
                .collect(),
        ),
        Mode::RealTime { epsilon } => (
            1.0 - epsilon,
            g.layers
                .iter()
                .map(|gl| gl.iter().map(|a| epsilon * a).collect())
                .collect(),
        ),
    };

    let mut out = Vec::with_capacity(n_hidden + 1);
    for m in 0..=n_hidden {
        let mut acc = vec![0.0; net.layer_sizes[m]];
        if m > 0 {
            net.weights.forward[m - 1].matvec_t_acc(&delta[m - 1], &mut acc);
        }
        if m < n_hidden {
            net.feedback_t_acc(m + 1, &delta[m + 1], &mut acc);
        }
        if let Mode::RealTime { .. } = net.mode {
            for ((a, sl), gm) in acc.iter_mut().zip(&lin.slope[m]).zip(&g.layers[m]) {
                *a = leak * gm + sl * *a;
            }
        }
        out.push(acc);
    }

    let params = with_params.then(|| {
        let mut p = net.weights.zeros_like();
        for n in 0..n_hidden {
            p.forward[n].add_outer(1.0, &delta[n], &lin.pre[n + 1]);
            if net.tied() {
                p.forward[n].add_outer(1.0, &lin.pre[n], &delta[n + 1]);
            }
        }
        p.input.add_outer(1.0, &delta[n_hidden], x_pre);
        if let Some(b) = &mut p.backward {
            for (n, m) in b.iter_mut().enumerate() {
                m.add_outer(1.0, &delta[n + 1], &lin.pre[n]);
            }
        }
        p
    });
    (NetworkState { layers: out }, params)
}

/// Backpropagation through the last `K` transitions of a stored trajectory.
pub fn bptt_gradients(
    net: &LayeredNetwork,
    x: &[f64],
    trajectory: &Trajectory,
    y: &[f64],
    k: usize,
) -> Result<GradientSeries> {
    let t_total = trajectory.len_steps();
    if k > t_total {
        return Err(Error::TrajectoryTooShort { k, t: t_total });
    }
    net.check_input(x)?;
    net.check_target(y)?;
    let drive = net.input_drive(x);
    let x_pre: Cow<[f64]> = net.presynaptic(x);
    let mut state_grads = vec![loss_state_grad(trajectory.steady_state(), y)];
    let mut param_grads = Vec::with_capacity(k);
    for t in 1..=k {
        let lin = linearize(net, &drive, &trajectory.states[t_total - t]);
        let (gs, gp) = vjp(net, &lin, &x_pre, &state_grads[t - 1], true);
        state_grads.push(gs);
        param_grads.push(gp.expect("params requested"));
    }
    Ok(GradientSeries {
        algorithm: GradientAlgorithm::Bptt,
        state_grads,
        param_grads,
    })
}

/// Recurrent backpropagation: the BPTT recurrence with every Jacobian frozen
/// at the steady state. Fails unless `‖F(s_*) - s_*‖ < tol`.
pub fn rbp_gradients(
    net: &LayeredNetwork,
    x: &[f64],
    s_star: &NetworkState,
    y: &[f64],
    k: usize,
    tol: f64,
) -> Result<GradientSeries> {
    net.check_target(y)?;
    let residual = net.residual(x, s_star)?;
    if residual.is_nan() || residual >= tol {
        return Err(Error::NotConverged { residual, tol });
    }
    let drive = net.input_drive(x);
    let x_pre: Cow<[f64]> = net.presynaptic(x);
    let lin = linearize(net, &drive, s_star);
    let mut state_grads = vec![loss_state_grad(s_star, y)];
    let mut param_grads = Vec::with_capacity(k);
    for t in 1..=k {
        let (gs, gp) = vjp(net, &lin, &x_pre, &state_grads[t - 1], true);
        state_grads.push(gs);
        param_grads.push(gp.expect("params requested"));
    }
    Ok(GradientSeries {
        algorithm: GradientAlgorithm::Rbp,
        state_grads,
        param_grads,
    })
}

/// Central-difference gradient of `ℓ(s_T, y)` with respect to every weight,
/// re-running the free phase for `T` steps at each perturbation.
///
/// With `tol = Some(ε)` every perturbed run must end with residual below
/// `ε`, which makes this the gradient of the steady-state loss `L*`.
pub fn finite_diff_loss_grad(
    net: &LayeredNetwork,
    x: &[f64],
    y: &[f64],
    t: usize,
    delta: f64,
    tol: Option<f64>,
) -> Result<Weights> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::InvalidHyper("finite-difference step must be > 0".into()));
    }
    net.check_target(y)?;
    let eval = |candidate: &LayeredNetwork| -> Result<f64> {
        let (s, residual) = relax(candidate, x, t)?;
        if let Some(tol) = tol {
            if residual.is_nan() || residual >= tol {
                return Err(Error::NotConverged { residual, tol });
            }
        }
        Ok(loss(&s, y))
    };
    let mut grad = net.weights.zeros_like();
    let n_blocks = grad.blocks().len();
    for b in 0..n_blocks {
        let len = net.weights.blocks()[b].1.len();
        let values: Vec<f64> = (0..len)
            .into_par_iter()
            .map(|i| {
                let mut plus = net.clone();
                plus.weights.blocks_mut()[b].1.as_mut_slice()[i] += delta;
                let mut minus = net.clone();
                minus.weights.blocks_mut()[b].1.as_mut_slice()[i] -= delta;
                Ok((eval(&plus)? - eval(&minus)?) / (2.0 * delta))
            })
            .collect::<Result<_>>()?;
        grad.blocks_mut()[b].1.as_mut_slice().copy_from_slice(&values);
    }
    Ok(grad)
}

/// Central-difference gradient of the projected cost `L_t = ℓ(F^t(s_0), y)`
/// with respect to the initial state, evaluated at `s_0 = s_*`.
pub fn projected_cost_state_grad(
    net: &LayeredNetwork,
    x: &[f64],
    s_star: &NetworkState,
    y: &[f64],
    t: usize,
    delta: f64,
) -> Result<NetworkState> {
    net.check_state(s_star)?;
    net.check_target(y)?;
    if t == 0 {
        return Ok(loss_state_grad(s_star, y));
    }
    let drive = net.input_drive(x);
    let cost = |mut s: NetworkState| -> Result<f64> {
        for step in 0..t {
            s = net.step_with_drive(&drive, &s, None);
            if !s.is_finite() {
                return Err(Error::Divergence {
                    phase: "projected cost",
                    step: step + 1,
                });
            }
        }
        Ok(loss(&s, y))
    };
    let mut out = loss_state_grad(s_star, y);
    for n in 0..s_star.layers.len() {
        for i in 0..s_star.layers[n].len() {
            let mut plus = s_star.clone();
            plus.layers[n][i] += delta;
            let mut minus = s_star.clone();
            minus.layers[n][i] -= delta;
            out.layers[n][i] = (cost(plus)? - cost(minus)?) / (2.0 * delta);
        }
    }
    Ok(out)
}
