//! The scalar toy model `s_{t+1} = ½(s_t + θ)` with target `y = 0`.
//!
//! Its primitive is `Φ(s, θ) = ¼(s + θ)²` and every algorithm has a closed
//! form, which makes it the exact oracle for the general engines.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{LayeredNetwork, Mode, Weights};
use crate::numerics::{ActivationKind, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyParams {
    pub theta: f64,
    pub beta: f64,
    pub eta: f64,
    /// First-phase steps.
    pub t_free: usize,
    /// Second-phase steps.
    pub k: usize,
}

/// Quantities with a closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quantity {
    SBeta,
    DsEp,
    DthetaEp,
    DsCep,
    DthetaCep,
    GsRbp,
    GthetaRbp,
    GsBptt,
    GthetaBptt,
}

impl Quantity {
    pub const ALL: [Quantity; 9] = [
        Quantity::SBeta,
        Quantity::DsEp,
        Quantity::DthetaEp,
        Quantity::DsCep,
        Quantity::DthetaCep,
        Quantity::GsRbp,
        Quantity::GthetaRbp,
        Quantity::GsBptt,
        Quantity::GthetaBptt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::SBeta => "s_beta",
            Quantity::DsEp => "d_s_ep",
            Quantity::DthetaEp => "d_theta_ep",
            Quantity::DsCep => "d_s_cep",
            Quantity::DthetaCep => "d_theta_cep",
            Quantity::GsRbp => "g_s_rbp",
            Quantity::GthetaRbp => "g_theta_rbp",
            Quantity::GsBptt => "g_s_bptt",
            Quantity::GthetaBptt => "g_theta_bptt",
        }
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Quantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Quantity::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| Error::UnknownQuantity(s.to_string()))
    }
}

fn powi(base: f64, t: usize) -> f64 {
    base.powi(t as i32)
}

/// `s_T` of the free phase started from zero.
pub fn free_state(theta: f64, t: usize) -> f64 {
    theta * (1.0 - powi(0.5, t))
}

/// Closed-form value of `q` at time `t`.
///
/// Second-phase formulas start from the exact steady state `s_0 = θ`.
/// Parameter gradients are indexed from 0, i.e. `g_theta(t)` is the
/// gradient paired with the update `Δ_θ(t)`.
pub fn toy_closed_form(p: &ToyParams, q: Quantity, t: usize) -> f64 {
    let ToyParams {
        theta, beta, eta, ..
    } = *p;
    let half_t = powi(0.5, t);
    let s_t = free_state(theta, p.t_free);
    match q {
        Quantity::SBeta => theta / (1.0 + 2.0 * beta) * (1.0 + 2.0 * beta * powi(0.5 - beta, t)),
        Quantity::DsEp => -theta * half_t * powi(1.0 - 2.0 * beta, t),
        Quantity::DthetaEp => -0.5 * theta * half_t * powi(1.0 - 2.0 * beta, t),
        Quantity::DsCep => -theta * half_t * powi(1.0 - 2.0 * beta + eta / (2.0 * beta), t),
        Quantity::DthetaCep => {
            -0.5 * theta * half_t * powi(1.0 - 2.0 * beta + eta / (2.0 * beta), t)
        }
        Quantity::GsRbp => theta * half_t,
        Quantity::GthetaRbp => 0.5 * theta * half_t,
        Quantity::GsBptt => s_t * half_t,
        Quantity::GthetaBptt => 0.5 * s_t * half_t,
    }
}

/// Look up a quantity by name.
pub fn closed_form_by_name(p: &ToyParams, name: &str, t: usize) -> Result<f64> {
    Ok(toy_closed_form(p, name.parse()?, t))
}

/// Every series of the toy model, computed by direct recurrence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToySeries {
    /// `s_0 … s_T`
    pub s_free: Vec<f64>,
    /// `s_0^β … s_K^β`
    pub s_ep: Vec<f64>,
    pub d_s_ep: Vec<f64>,
    pub d_theta_ep: Vec<f64>,
    /// `s_0^{β,η} … s_K^{β,η}`
    pub s_cep: Vec<f64>,
    /// `θ_0 … θ_K` along the C-EP second phase.
    pub theta_cep: Vec<f64>,
    pub d_s_cep: Vec<f64>,
    pub d_theta_cep: Vec<f64>,
    /// `t = 0 … K`
    pub g_s_rbp: Vec<f64>,
    pub g_theta_rbp: Vec<f64>,
    pub g_s_bptt: Vec<f64>,
    pub g_theta_bptt: Vec<f64>,
}

impl ToySeries {
    pub fn get(&self, q: Quantity) -> &[f64] {
        match q {
            Quantity::SBeta => &self.s_ep,
            Quantity::DsEp => &self.d_s_ep,
            Quantity::DthetaEp => &self.d_theta_ep,
            Quantity::DsCep => &self.d_s_cep,
            Quantity::DthetaCep => &self.d_theta_cep,
            Quantity::GsRbp => &self.g_s_rbp,
            Quantity::GthetaRbp => &self.g_theta_rbp,
            Quantity::GsBptt => &self.g_s_bptt,
            Quantity::GthetaBptt => &self.g_theta_bptt,
        }
    }

    /// CSV with one row per second-phase step `t = 0 … K-1`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "t,s_ep,s_cep,theta_cep,d_s_ep,d_theta_ep,d_s_cep,d_theta_cep,\
             g_s_rbp,g_theta_rbp,g_s_bptt,g_theta_bptt"
        )?;
        for t in 0..self.d_s_ep.len() {
            writeln!(
                w,
                "{t},{},{},{},{},{},{},{},{},{},{},{}",
                self.s_ep[t],
                self.s_cep[t],
                self.theta_cep[t],
                self.d_s_ep[t],
                self.d_theta_ep[t],
                self.d_s_cep[t],
                self.d_theta_cep[t],
                self.g_s_rbp[t],
                self.g_theta_rbp[t],
                self.g_s_bptt[t],
                self.g_theta_bptt[t],
            )?;
        }
        Ok(())
    }
}

fn free_step(s: f64, theta: f64) -> f64 {
    0.5 * (s + theta)
}

fn nudged_step(s: f64, theta: f64, beta: f64) -> f64 {
    free_step(s, theta) + beta * (0.0 - s)
}

/// `∂Φ/∂θ` of `Φ = ¼(s + θ)²`.
fn phi_theta(s: f64, theta: f64) -> f64 {
    0.5 * (s + theta)
}

/// Parameter step of C-EP as the toy's own system writes it.
pub fn cep_theta_step(theta: f64, s: f64, s_next: f64, beta: f64, eta: f64) -> f64 {
    theta + eta / (2.0 * beta) * (s_next - s)
}

/// The same step through the general primitive-function rule.
pub fn cep_theta_step_general(theta: f64, s: f64, s_next: f64, beta: f64, eta: f64) -> f64 {
    theta + eta / beta * (phi_theta(s_next, theta) - phi_theta(s, theta))
}

/// Run every recurrence of the toy model.
pub fn toy_simulate(p: &ToyParams) -> Result<ToySeries> {
    if p.k > p.t_free {
        return Err(Error::TrajectoryTooShort {
            k: p.k,
            t: p.t_free,
        });
    }
    if p.beta == 0.0 {
        return Err(Error::InvalidHyper("toy beta must be non-zero".into()));
    }
    let ToyParams {
        theta, beta, eta, ..
    } = *p;
    let mut out = ToySeries::default();

    out.s_free.push(0.0);
    for t in 0..p.t_free {
        out.s_free.push(free_step(out.s_free[t], theta));
    }
    let s_star = out.s_free[p.t_free];

    out.s_ep.push(s_star);
    for t in 0..p.k {
        let s = out.s_ep[t];
        let next = nudged_step(s, theta, beta);
        out.s_ep.push(next);
        out.d_s_ep.push((next - s) / beta);
        out.d_theta_ep.push((phi_theta(next, theta) - phi_theta(s, theta)) / beta);
    }

    out.s_cep.push(s_star);
    out.theta_cep.push(theta);
    for t in 0..p.k {
        let (s, th) = (out.s_cep[t], out.theta_cep[t]);
        let next = nudged_step(s, th, beta);
        let th_next = cep_theta_step(th, s, next, beta, eta);
        out.s_cep.push(next);
        out.theta_cep.push(th_next);
        out.d_s_cep.push((next - s) / beta);
        // Read off the rule itself; (θ_{t+1} − θ_t)/η loses digits for tiny η.
        out.d_theta_cep
            .push((phi_theta(next, th) - phi_theta(s, th)) / beta);
    }

    // ∂F/∂s = ∂F/∂θ = ½ everywhere, so both engines share the recurrence;
    // they differ only in the anchoring state.
    let backprop = |anchor: f64| {
        let mut gs = vec![anchor];
        let mut gt = Vec::new();
        for t in 0..=p.k {
            gt.push(0.5 * gs[t]);
            if t < p.k {
                gs.push(0.5 * gs[t]);
            }
        }
        (gs, gt)
    };
    (out.g_s_bptt, out.g_theta_bptt) = backprop(s_star);
    (out.g_s_rbp, out.g_theta_rbp) = backprop(s_star);
    Ok(out)
}

/// Beta of the layered embedding that reproduces toy nudging strength `beta`.
///
/// The embedding runs in real time with `ε = ½`, and real-time nudging acts
/// with strength `βε`.
pub fn embedded_beta(beta: f64) -> f64 {
    beta / EMBED_EPSILON
}

const EMBED_EPSILON: f64 = 0.5;

/// The toy model as a layered network: a single linear output unit driven
/// by `x = [1]` through `W_{0,x} = [[θ]]`, real time with `ε = ½`, so that
/// `F(s) = ½s + ½θ`. Returns `(net, x, y)` with `y = [0]`.
pub fn embed(theta: f64) -> (LayeredNetwork, Vec<f64>, Vec<f64>) {
    let net = LayeredNetwork::new(
        vec![1],
        1,
        ActivationKind::Identity,
        Mode::RealTime {
            epsilon: EMBED_EPSILON,
        },
        Weights {
            forward: Vec::new(),
            input: Matrix::new(1, 1, vec![theta]).expect("finite theta"),
            backward: None,
        },
    )
    .expect("valid toy topology");
    (net, vec![1.0], vec![0.0])
}
