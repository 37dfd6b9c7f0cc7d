//! Dense row-major matrices, activation functions and the angle metric.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                context: "Matrix::new",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `out += self · v`
    pub fn matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o += dot(row, v);
        }
    }

    /// `self · v`
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_acc(v, &mut out);
        out
    }

    /// `out += selfᵀ · v`
    pub fn matvec_t_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (row, &vi) in self.data.chunks_exact(self.cols.max(1)).zip(v) {
            if vi != 0.0 {
                axpy(vi, row, out);
            }
        }
    }

    /// `selfᵀ · v`
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        self.matvec_t_acc(v, &mut out);
        out
    }

    /// `self += alpha · a bᵀ`
    pub fn add_outer(&mut self, alpha: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (row, &ai) in self.data.chunks_exact_mut(self.cols.max(1)).zip(a) {
            let s = alpha * ai;
            if s != 0.0 {
                axpy(s, b, row);
            }
        }
    }

    /// `self += Σ_k alpha_k a_k b_kᵀ`. Rows are processed in parallel and the
    /// terms always in the given order, so the result is thread-independent.
    pub fn add_outer_sum(&mut self, terms: &[(f64, &[f64], &[f64])]) {
        let cols = self.cols.max(1);
        self.data
            .par_chunks_exact_mut(cols)
            .enumerate()
            .for_each(|(i, row)| {
                for &(alpha, a, b) in terms {
                    let s = alpha * a[i];
                    if s != 0.0 {
                        axpy(s, b, row);
                    }
                }
            });
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Pointwise nonlinearity of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Tanh,
    /// `1 / (1 + exp(-4 (x - 1/2)))`
    #[serde(alias = "sigmoid")]
    ShiftedSigmoid,
    /// Linear units; only used to embed the scalar toy model.
    Identity,
}

impl ActivationKind {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::ShiftedSigmoid => 1.0 / (1.0 + (-4.0 * (x - 0.5)).exp()),
            ActivationKind::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::ShiftedSigmoid => {
                let s = self.eval(x);
                4.0 * s * (1.0 - s)
            }
            ActivationKind::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::ShiftedSigmoid => "sigmoid",
            ActivationKind::Identity => "identity",
        }
    }
}

/// Elementwise `σ(v)`.
pub fn activation_apply(kind: ActivationKind, v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("activation_apply"));
    }
    Ok(v.iter().map(|&x| kind.eval(x)).collect())
}

/// Elementwise `σ′(v)`.
pub fn activation_derivative(kind: ActivationKind, v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("activation_derivative"));
    }
    Ok(v.iter().map(|&x| kind.derivative(x)).collect())
}

/// Cosine similarity, `None` when either vector is exactly zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Angle in degrees between two flattened arrays.
pub fn angle_between(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context: "angle_between",
            expected: a.len(),
            found: b.len(),
        });
    }
    cosine(a, b)
        .map(|c| c.acos().to_degrees())
        .ok_or(Error::ZeroNorm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outer_sum_matches_repeated_outer() {
        let a1 = [1.0, -2.0];
        let b1 = [0.5, 0.25, 3.0];
        let a2 = [0.0, 4.0];
        let b2 = [1.0, 1.0, -1.0];
        let mut m = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let mut r = m.clone();
        m.add_outer_sum(&[(0.5, &a1, &b1), (-1.0, &a2, &b2)]);
        r.add_outer(0.5, &a1, &b1);
        r.add_outer(-1.0, &a2, &b2);
        assert_eq!(m, r);
    }
    use proptest::prelude::*;

    #[test]
    fn activation_fixed_points() {
        assert_eq!(activation_apply(ActivationKind::Tanh, &[0.0]).unwrap(), vec![0.0]);
        assert_eq!(
            activation_apply(ActivationKind::ShiftedSigmoid, &[0.5]).unwrap(),
            vec![0.5]
        );
        let big = activation_apply(ActivationKind::Tanh, &[30.0]).unwrap()[0];
        assert!(big <= 1.0 && big > 0.99);
        assert!(ActivationKind::Tanh.derivative(30.0).abs() <= 1.0);
    }

    #[test]
    fn activation_rejects_nan() {
        assert!(activation_apply(ActivationKind::Tanh, &[f64::NAN]).is_err());
        assert!(activation_derivative(ActivationKind::Tanh, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-6;
        for kind in [
            ActivationKind::Tanh,
            ActivationKind::ShiftedSigmoid,
            ActivationKind::Identity,
        ] {
            for i in 0..100 {
                let x = -3.0 + 6.0 * i as f64 / 99.0;
                let fd = (kind.eval(x + h) - kind.eval(x - h)) / (2.0 * h);
                let d = kind.derivative(x);
                let rel = (fd - d).abs() / d.abs().max(1e-12);
                assert!(rel < 1e-6, "{kind:?} at {x}: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn angles_of_reference_pairs() {
        let a = [1.0, -2.0, 3.0];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(angle_between(&a, &a).unwrap().abs() < 1e-6);
        assert!((angle_between(&a, &neg).unwrap() - 180.0).abs() < 1e-6);
        assert!((angle_between(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 90.0).abs() < 1e-12);
        assert!(matches!(angle_between(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
        assert!(cosine(&[0.0], &[1.0]).is_none());
    }

    #[test]
    fn matrix_products() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        assert_eq!(m.transpose().matvec(&[1.0, 1.0]), m.matvec_t(&[1.0, 1.0]));
        let mut z = Matrix::zeros(2, 3);
        z.add_outer(2.0, &[1.0, -1.0], &[1.0, 2.0, 3.0]);
        assert_eq!(z.as_slice(), &[2.0, 4.0, 6.0, -2.0, -4.0, -6.0]);
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn angle_is_symmetric_and_scale_invariant(
            a in prop::collection::vec(-10.0f64..10.0, 6),
            b in prop::collection::vec(-10.0f64..10.0, 6),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let ab = angle_between(&a, &b).unwrap();
            let ba = angle_between(&b, &a).unwrap();
            let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((angle_between(&scaled, &b).unwrap() - ab).abs() < 1e-6);
            prop_assert!((0.0..=180.0).contains(&ab));
        }
    }
}
