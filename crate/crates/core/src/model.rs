//! Layered convergent RNNs.
//!
//! Layers are numbered backward from the output: `s^0` is the output layer,
//! `s^N` the hidden layer closest to the input. `W_{n,n+1}` (shape
//! `d_n × d_{n+1}`) carries `s^{n+1}` into `s^n`, `W_{N,x}` carries the input
//! into `s^N`. With tied weights the feedback path reads `W_{n,n+1}ᵀ`; untied
//! networks hold separate feedback matrices `W_{n+1,n}` (shape `d_{n+1} × d_n`).
//!
//! Two dynamics are supported:
//!
//! * discrete time: `s^n ← σ(W_{n,n+1}s^{n+1} + W_{n-1,n}ᵀs^{n-1})`
//! * real time: `s^n ← (1-ε)s^n + ε(W_{n,n+1}σ(s^{n+1}) + W_{n-1,n}ᵀσ(s^{n-1}))`,
//!   with `σ(x)` feeding the last hidden layer.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, norm, ActivationKind, Matrix};

/// Time discretization of the network dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    DiscreteTime,
    RealTime { epsilon: f64 },
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::DiscreteTime => "discrete",
            Mode::RealTime { .. } => "real_time",
        }
    }

    /// Coefficient in front of `(y - s^0)` for a nudging strength `beta`.
    pub fn nudge_gain(self, beta: f64) -> f64 {
        match self {
            Mode::DiscreteTime => beta,
            Mode::RealTime { epsilon } => beta * epsilon,
        }
    }
}

/// Identifies one weight matrix of a layered network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockId {
    /// `W_{n,n+1}`
    Forward(usize),
    /// `W_{N,x}`
    Input,
    /// `W_{n+1,n}` (untied networks only)
    Backward(usize),
}

impl BlockId {
    /// Index into the per-layer learning-rate list. Feedback weights share
    /// the rate of their forward counterpart.
    pub fn lr_index(self, n_hidden: usize) -> usize {
        match self {
            BlockId::Forward(n) | BlockId::Backward(n) => n,
            BlockId::Input => n_hidden,
        }
    }

    pub fn name(self, n_hidden: usize) -> String {
        match self {
            BlockId::Forward(n) => format!("W{}{}", n, n + 1),
            BlockId::Input => format!("W{n_hidden}x"),
            BlockId::Backward(n) => format!("W{}{}", n + 1, n),
        }
    }
}

/// All trainable matrices. The same shape is reused for gradients and updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub forward: Vec<Matrix>,
    pub input: Matrix,
    pub backward: Option<Vec<Matrix>>,
}

impl Weights {
    pub fn zeros_like(&self) -> Weights {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Weights {
            forward: self.forward.iter().map(z).collect(),
            input: z(&self.input),
            backward: self.backward.as_ref().map(|b| b.iter().map(z).collect()),
        }
    }

    pub fn is_tied(&self) -> bool {
        self.backward.is_none()
    }

    /// Blocks in canonical order: forward, input, backward.
    pub fn blocks(&self) -> Vec<(BlockId, &Matrix)> {
        let mut out: Vec<(BlockId, &Matrix)> = self
            .forward
            .iter()
            .enumerate()
            .map(|(n, m)| (BlockId::Forward(n), m))
            .collect();
        out.push((BlockId::Input, &self.input));
        if let Some(b) = &self.backward {
            out.extend(b.iter().enumerate().map(|(n, m)| (BlockId::Backward(n), m)));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(BlockId, &mut Matrix)> {
        let mut out: Vec<(BlockId, &mut Matrix)> = self
            .forward
            .iter_mut()
            .enumerate()
            .map(|(n, m)| (BlockId::Forward(n), m))
            .collect();
        out.push((BlockId::Input, &mut self.input));
        if let Some(b) = &mut self.backward {
            out.extend(b.iter_mut().enumerate().map(|(n, m)| (BlockId::Backward(n), m)));
        }
        out
    }

    pub fn block(&self, id: BlockId) -> &Matrix {
        match id {
            BlockId::Forward(n) => &self.forward[n],
            BlockId::Input => &self.input,
            BlockId::Backward(n) => &self.backward.as_ref().expect("untied weights")[n],
        }
    }

    /// `self += alpha · other`, blockwise.
    pub fn axpy(&mut self, alpha: f64, other: &Weights) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.axpy(alpha, b);
        }
    }

    /// `self += lr[block] · other`
    pub fn axpy_per_block(&mut self, lr: &[f64], other: &Weights) {
        let n_hidden = self.forward.len();
        for ((id, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            let eta = lr[id.lr_index(n_hidden)];
            if eta != 0.0 {
                a.axpy(eta, b);
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, m) in self.blocks_mut() {
            m.scale(alpha);
        }
    }

    /// Concatenation of every block in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks()
            .into_iter()
            .flat_map(|(_, m)| m.as_slice().iter().copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().into_iter().all(|(_, m)| m.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Weights) -> f64 {
        self.blocks()
            .into_iter()
            .zip(other.blocks())
            .flat_map(|((_, a), (_, b))| {
                a.as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(x, y)| (x - y).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

/// Per-layer activations, output layer first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub layers: Vec<Vec<f64>>,
}

impl NetworkState {
    pub fn zeros(layer_sizes: &[usize]) -> Self {
        Self {
            layers: layer_sizes.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    pub fn output(&self) -> &[f64] {
        &self.layers[0]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|v| v.is_finite())
    }

    /// Euclidean distance over all layers.
    pub fn distance(&self, other: &NetworkState) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }

    /// `(other - self) · scale`, layerwise.
    pub fn scaled_diff(&self, other: &NetworkState, scale: f64) -> NetworkState {
        NetworkState {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (y - x) * scale).collect())
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &NetworkState) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Nudging term `gain · (y - s^0)` added to the output layer.
#[derive(Debug, Clone, Copy)]
pub struct Nudge<'a> {
    pub target: &'a [f64],
    pub beta: f64,
}

/// Step counts, nudging strength and learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// First-phase steps `T`.
    pub t_free: usize,
    /// Second-phase steps `K`.
    pub k_nudge: usize,
    pub beta: f64,
    /// One rate per layer, output side first; the last entry drives `W_{N,x}`.
    pub lr: Vec<f64>,
    pub random_beta: bool,
    /// `η_tiny / η` for the rescaled debugging update; `None` disables it.
    pub lr_tiny_scale: Option<f64>,
    pub convergence_tol: f64,
}

impl Hyperparams {
    pub fn validate(&self, net: &LayeredNetwork) -> Result<()> {
        if self.t_free == 0 || self.k_nudge == 0 {
            return Err(Error::InvalidHyper("T and K must be positive".into()));
        }
        if self.beta == 0.0 || !self.beta.is_finite() {
            return Err(Error::InvalidHyper(format!("beta must be non-zero, got {}", self.beta)));
        }
        if self.lr.len() != net.n_hidden() + 1 {
            return Err(Error::InvalidHyper(format!(
                "expected {} learning rates, got {}",
                net.n_hidden() + 1,
                self.lr.len()
            )));
        }
        if self.lr.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidHyper("learning rates must be >= 0".into()));
        }
        if let Some(s) = self.lr_tiny_scale {
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::InvalidHyper("lr_tiny_scale must be > 0".into()));
            }
        }
        if let Mode::RealTime { epsilon } = net.mode {
            if !(epsilon > 0.0 && epsilon <= 1.0) {
                return Err(Error::InvalidHyper(format!("epsilon {epsilon} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// A layered convergent RNN.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredNetwork {
    /// `[d_0, …, d_N]`, output first.
    pub layer_sizes: Vec<usize>,
    pub input_size: usize,
    pub activation: ActivationKind,
    pub mode: Mode,
    pub weights: Weights,
}

impl LayeredNetwork {
    pub fn new(
        layer_sizes: Vec<usize>,
        input_size: usize,
        activation: ActivationKind,
        mode: Mode,
        weights: Weights,
    ) -> Result<Self> {
        let net = Self {
            layer_sizes,
            input_size,
            activation,
            mode,
            weights,
        };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = &self.layer_sizes;
        if d.is_empty() {
            return Err(Error::InvalidHyper("network needs at least one layer".into()));
        }
        let n = d.len() - 1;
        let expect = |context, m: &Matrix, r: usize, c: usize| {
            if m.shape() != (r, c) {
                Err(Error::Dimension {
                    context,
                    expected: r * c,
                    found: m.len(),
                })
            } else {
                Ok(())
            }
        };
        if self.weights.forward.len() != n {
            return Err(Error::Dimension {
                context: "forward weight count",
                expected: n,
                found: self.weights.forward.len(),
            });
        }
        for (i, m) in self.weights.forward.iter().enumerate() {
            expect("forward weights", m, d[i], d[i + 1])?;
        }
        expect("input weights", &self.weights.input, d[n], self.input_size)?;
        if let Some(b) = &self.weights.backward {
            if b.len() != n {
                return Err(Error::Dimension {
                    context: "backward weight count",
                    expected: n,
                    found: b.len(),
                });
            }
            for (i, m) in b.iter().enumerate() {
                expect("backward weights", m, d[i + 1], d[i])?;
            }
        }
        Ok(())
    }

    /// Number of hidden layers `N`.
    pub fn n_hidden(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn tied(&self) -> bool {
        self.weights.is_tied()
    }

    pub fn output_size(&self) -> usize {
        self.layer_sizes[0]
    }

    /// `"784-64-10"`, input first.
    pub fn topology_label(&self) -> String {
        std::iter::once(self.input_size)
            .chain(self.layer_sizes.iter().rev().copied())
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn zero_state(&self) -> NetworkState {
        NetworkState::zeros(&self.layer_sizes)
    }

    /// Presynaptic signal carried by a coupling: raw state in discrete
    /// time, `σ(state)` in real time.
    pub fn presynaptic<'a>(&self, v: &'a [f64]) -> Cow<'a, [f64]> {
        match self.mode {
            Mode::DiscreteTime => Cow::Borrowed(v),
            Mode::RealTime { .. } => Cow::Owned(v.iter().map(|&u| self.activation.eval(u)).collect()),
        }
    }

    /// Derivative of [`Self::presynaptic`].
    pub(crate) fn presynaptic_derivative(&self, v: &[f64]) -> Option<Vec<f64>> {
        match self.mode {
            Mode::DiscreteTime => None,
            Mode::RealTime { .. } => Some(v.iter().map(|&u| self.activation.derivative(u)).collect()),
        }
    }

    /// Input contribution to the last hidden layer, `W_{N,x} x` (discrete)
    /// or `W_{N,x} σ(x)` (real time). Constant while the weights are frozen.
    pub fn input_drive(&self, x: &[f64]) -> Vec<f64> {
        self.weights.input.matvec(&self.presynaptic(x))
    }

    /// `out += B_n p`, the feedback from layer `n-1` into layer `n`.
    pub(crate) fn feedback_acc(&self, n: usize, p: &[f64], out: &mut [f64]) {
        match &self.weights.backward {
            None => self.weights.forward[n - 1].matvec_t_acc(p, out),
            Some(b) => b[n - 1].matvec_acc(p, out),
        }
    }

    /// `out += B_nᵀ g`
    pub(crate) fn feedback_t_acc(&self, n: usize, g: &[f64], out: &mut [f64]) {
        match &self.weights.backward {
            None => self.weights.forward[n - 1].matvec_acc(g, out),
            Some(b) => b[n - 1].matvec_t_acc(g, out),
        }
    }

    /// Total synaptic input to every layer. In discrete time these are the
    /// pre-activations; in real time the term multiplied by `ε`.
    pub fn couplings(&self, drive: &[f64], s: &NetworkState) -> Vec<Vec<f64>> {
        let n_hidden = self.n_hidden();
        let pre: Vec<Cow<[f64]>> = s.layers.iter().map(|l| self.presynaptic(l)).collect();
        (0..=n_hidden)
            .map(|n| {
                let mut c = vec![0.0; self.layer_sizes[n]];
                if n < n_hidden {
                    self.weights.forward[n].matvec_acc(&pre[n + 1], &mut c);
                }
                if n > 0 {
                    self.feedback_acc(n, &pre[n - 1], &mut c);
                }
                if n == n_hidden {
                    axpy(1.0, drive, &mut c);
                }
                c
            })
            .collect()
    }

    /// One synchronous update of all layers given a precomputed input drive.
    pub fn step_with_drive(
        &self,
        drive: &[f64],
        s: &NetworkState,
        nudge: Option<Nudge<'_>>,
    ) -> NetworkState {
        let couplings = self.couplings(drive, s);
        let mut layers: Vec<Vec<f64>> = match self.mode {
            Mode::DiscreteTime => couplings
                .into_iter()
                .map(|c| c.into_iter().map(|a| self.activation.eval(a)).collect())
                .collect(),
            Mode::RealTime { epsilon } => couplings
                .into_iter()
                .zip(&s.layers)
                .map(|(c, old)| {
                    c.iter()
                        .zip(old)
                        .map(|(a, o)| (1.0 - epsilon) * o + epsilon * a)
                        .collect()
                })
                .collect(),
        };
        if let Some(Nudge { target, beta }) = nudge {
            let gain = self.mode.nudge_gain(beta);
            if gain != 0.0 {
                for ((o, y), old) in layers[0].iter_mut().zip(target).zip(&s.layers[0]) {
                    *o += gain * (y - old);
                }
            }
        }
        NetworkState { layers }
    }

    /// `F(x, s, θ)`: one step of the free dynamics.
    pub fn transition_step(&self, x: &[f64], s: &NetworkState) -> Result<NetworkState> {
        self.check_input(x)?;
        self.check_state(s)?;
        Ok(self.step_with_drive(&self.input_drive(x), s, None))
    }

    /// `‖F(s) - s‖`
    pub fn residual(&self, x: &[f64], s: &NetworkState) -> Result<f64> {
        Ok(self.transition_step(x, s)?.distance(s))
    }

    pub(crate) fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_size {
            return Err(Error::Dimension {
                context: "input",
                expected: self.input_size,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_target(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.output_size() {
            return Err(Error::Dimension {
                context: "target",
                expected: self.output_size(),
                found: y.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_state(&self, s: &NetworkState) -> Result<()> {
        if s.layers.len() != self.layer_sizes.len() {
            return Err(Error::Dimension {
                context: "state layer count",
                expected: self.layer_sizes.len(),
                found: s.layers.len(),
            });
        }
        for (l, &d) in s.layers.iter().zip(&self.layer_sizes) {
            if l.len() != d {
                return Err(Error::Dimension {
                    context: "state layer size",
                    expected: d,
                    found: l.len(),
                });
            }
        }
        Ok(())
    }

    /// Primitive function `Φ(x, s, θ)` of a tied network.
    pub fn primitive_phi(&self, x: &[f64], s: &NetworkState) -> Result<f64> {
        if !self.tied() {
            return Err(Error::RequiresTied("primitive function"));
        }
        self.check_input(x)?;
        self.check_state(s)?;
        let n_hidden = self.n_hidden();
        let pre: Vec<Cow<[f64]>> = s.layers.iter().map(|l| self.presynaptic(l)).collect();
        let mut bilinear = 0.0;
        for n in 0..n_hidden {
            bilinear += dot(&pre[n], &self.weights.forward[n].matvec(&pre[n + 1]));
        }
        bilinear += dot(&pre[n_hidden], &self.input_drive(x));
        Ok(match self.mode {
            Mode::DiscreteTime => bilinear,
            Mode::RealTime { epsilon } => {
                let sq: f64 = s.layers.iter().map(|l| dot(l, l)).sum();
                0.5 * (1.0 - epsilon) * sq + epsilon * bilinear
            }
        })
    }

    /// Outer products `p(s^n) p(s^{n+1})ᵀ` and `p(s^N) p(x)ᵀ` per block.
    /// Up to the factor `ε` in real time, this is `∂Φ/∂θ`.
    pub fn hebbian(&self, x: &[f64], s: &NetworkState) -> Weights {
        let n_hidden = self.n_hidden();
        let pre: Vec<Cow<[f64]>> = s.layers.iter().map(|l| self.presynaptic(l)).collect();
        let mut out = self.weights.zeros_like();
        for n in 0..n_hidden {
            out.forward[n].add_outer(1.0, &pre[n], &pre[n + 1]);
        }
        out.input.add_outer(1.0, &pre[n_hidden], &self.presynaptic(x));
        if let Some(b) = &mut out.backward {
            for (n, m) in b.iter_mut().enumerate() {
                m.add_outer(1.0, &pre[n + 1], &pre[n]);
            }
        }
        out
    }

    /// `∂Φ/∂θ(x, s, θ)` for a tied network.
    pub fn phi_param_grad(&self, x: &[f64], s: &NetworkState) -> Result<Weights> {
        if !self.tied() {
            return Err(Error::RequiresTied("primitive function"));
        }
        let mut g = self.hebbian(x, s);
        if let Mode::RealTime { epsilon } = self.mode {
            g.scale(epsilon);
        }
        Ok(g)
    }

    /// Contrastive update `(1/β)(p(s')p(s')ᵀ - p(s)p(s)ᵀ)` between two states.
    pub fn contrastive_update(
        &self,
        x: &[f64],
        from: &NetworkState,
        to: &NetworkState,
        beta: f64,
    ) -> Weights {
        let mut d = self.hebbian(x, to);
        d.axpy(-1.0, &self.hebbian(x, from));
        d.scale(1.0 / beta);
        d
    }

    /// Pre/post-synaptic update `(1/β)(post' - post) p(pre)ᵀ` with the
    /// presynaptic factor taken at the earlier state.
    pub fn vector_field_update(
        &self,
        x: &[f64],
        from: &NetworkState,
        to: &NetworkState,
        beta: f64,
    ) -> Weights {
        let n_hidden = self.n_hidden();
        let inv = 1.0 / beta;
        let pre: Vec<Cow<[f64]>> = from.layers.iter().map(|l| self.presynaptic(l)).collect();
        let post: Vec<Vec<f64>> = from
            .layers
            .iter()
            .zip(&to.layers)
            .map(|(a, b)| b.iter().zip(a).map(|(u, v)| u - v).collect())
            .collect();
        let mut out = self.weights.zeros_like();
        for n in 0..n_hidden {
            out.forward[n].add_outer(inv, &post[n], &pre[n + 1]);
        }
        out.input.add_outer(inv, &post[n_hidden], &self.presynaptic(x));
        if let Some(b) = &mut out.backward {
            for (n, m) in b.iter_mut().enumerate() {
                m.add_outer(inv, &post[n + 1], &pre[n]);
            }
        }
        out
    }

    /// Single symmetric matrix `W` and input matrix `W_x` over the
    /// concatenated state, so that `Φ = ½ sᵀWs + sᵀW_x x` in discrete time.
    pub fn condensed(&self) -> Result<(Matrix, Matrix)> {
        if !self.tied() {
            return Err(Error::RequiresTied("condensed form"));
        }
        let offsets: Vec<usize> = self
            .layer_sizes
            .iter()
            .scan(0, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect();
        let total: usize = self.layer_sizes.iter().sum();
        let mut w = Matrix::zeros(total, total);
        for (n, m) in self.weights.forward.iter().enumerate() {
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    w.set(offsets[n] + i, offsets[n + 1] + j, m.get(i, j));
                    w.set(offsets[n + 1] + j, offsets[n] + i, m.get(i, j));
                }
            }
        }
        let n_hidden = self.n_hidden();
        let input = &self.weights.input;
        let wx = Matrix::from_fn(total, self.input_size, |i, j| {
            if i >= offsets[n_hidden] {
                input.get(i - offsets[n_hidden], j)
            } else {
                0.0
            }
        });
        Ok((w, wx))
    }

    /// Copy with untied weights `W_{n+1,n} = W_{n,n+1}ᵀ`.
    pub fn untie(&self) -> LayeredNetwork {
        let mut net = self.clone();
        if net.weights.backward.is_none() {
            net.weights.backward = Some(net.weights.forward.iter().map(Matrix::transpose).collect());
        }
        net
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layer_sizes: self.layer_sizes.clone(),
            input_size: self.input_size,
            tied: self.tied(),
            mode: self.mode,
            activation: self.activation,
            weights: self.weights.clone(),
        };
        let text = serde_json::to_string(&ck).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.tied != ck.weights.is_tied() {
            return Err(Error::Checkpoint("tied flag disagrees with stored weights".into()));
        }
        if !ck.weights.is_finite() {
            return Err(Error::NonFinite("checkpoint weights"));
        }
        LayeredNetwork::new(ck.layer_sizes, ck.input_size, ck.activation, ck.mode, ck.weights)
    }
}

const CHECKPOINT_FORMAT: &str = "eqprop-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    input_size: usize,
    tied: bool,
    mode: Mode,
    activation: ActivationKind,
    weights: Weights,
}

/// `½‖y - s^0‖²`
pub fn loss(s: &NetworkState, y: &[f64]) -> f64 {
    0.5 * s.output().iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum::<f64>()
}

/// `∂ℓ/∂s`: `s^0 - y` on the output layer, zero elsewhere.
pub fn loss_state_grad(s: &NetworkState, y: &[f64]) -> NetworkState {
    let mut g = NetworkState {
        layers: s.layers.iter().map(|l| vec![0.0; l.len()]).collect(),
    };
    for ((gi, si), yi) in g.layers[0].iter_mut().zip(s.output()).zip(y) {
        *gi = si - yi;
    }
    g
}

/// Euclidean norm of a flattened state.
pub fn state_norm(s: &NetworkState) -> f64 {
    norm(&s.flatten())
}
