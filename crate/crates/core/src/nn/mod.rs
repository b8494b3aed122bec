//! Minimal dense-network machinery: layers, the residual adapter, softmax and
//! cross-entropy, and first-order optimizers.
//!
//! Everything is row-major and batch-first: a batch of `n` samples is an `n×width`
//! [`Matrix`], and linear maps act on row vectors (`l = z·W`).

mod adapter;
mod dense;
mod optim;

pub use adapter::{Adapter, AdapterCache};
pub use dense::{DenseCache, DenseLayer, DenseNet};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Floor applied inside `log` by [`cross_entropy`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative, given the pre-activation `x` and the output `y = apply(x)`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

/// Per-tensor partial derivatives, in the same order as the owner's parameter list.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.0
    }

    pub fn extend(&mut self, other: Gradients) {
        self.0.extend(other.0);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Anything with trainable tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Bias-free linear classifier, `l = z·W` with `W` of shape `d×K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub w: Matrix,
}

impl LinearHead {
    pub fn new(d: usize, k: usize, rng: &mut Rng) -> Self {
        Self {
            w: gaussian_matrix(d, k, (1.0 / d as f64).sqrt(), rng),
        }
    }

    pub fn logits(&self, z: &Matrix) -> Result<Matrix> {
        z.matmul(&self.w)
    }

    /// Returns `(∂L/∂W, ∂L/∂z)` given `∂L/∂logits`.
    pub fn backward(&self, z: &Matrix, d_logits: &Matrix) -> Result<(Gradients, Matrix)> {
        let dw = z.t_matmul(d_logits)?;
        let dz = d_logits.matmul_t(&self.w)?;
        Ok((Gradients(vec![dw.into_vec()]), dz))
    }
}

impl Parameterized for LinearHead {
    fn params(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice()]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_mut_slice()]
    }
}

pub(crate) fn gaussian_matrix(rows: usize, cols: usize, sd: f64, rng: &mut Rng) -> Matrix {
    let normal = Normal::new(0.0, sd).expect("positive sd");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    ensure!(!logits.is_empty(), Empty, "softmax of an empty vector");
    if let Some(bad) = logits.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input contains {bad}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let p = softmax(logits.row(i))?;
        out.row_mut(i).copy_from_slice(&p);
    }
    Ok(out)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean over rows of `−Σ_k y_k·log(max(p_k, 1e-12))`. Labels may be soft.
pub fn cross_entropy(probs: &Matrix, labels: &Matrix) -> Result<f64> {
    ensure!(
        probs.shape() == labels.shape(),
        Shape,
        "probabilities {:?} vs labels {:?}",
        probs.shape(),
        labels.shape()
    );
    ensure!(probs.rows() > 0, Empty, "cross-entropy of an empty batch");
    let mut total = 0.0;
    for i in 0..probs.rows() {
        for (&p, &y) in probs.row(i).iter().zip(labels.row(i)) {
            if y != 0.0 {
                total -= y * p.max(LOG_FLOOR).ln();
            }
        }
    }
    Ok(total / probs.rows() as f64)
}

/// Gradient of `weight · cross_entropy(softmax(logits), labels)` w.r.t. the logits:
/// `weight · (p − y) / n` for labels summing to one.
pub fn softmax_ce_grad(probs: &Matrix, labels: &Matrix, weight: f64) -> Result<Matrix> {
    let n = probs.rows() as f64;
    probs.zip_with(labels, |p, y| weight * (p - y) / n)
}

pub fn one_hot(labels: &[usize], k: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), k);
    for (i, &y) in labels.iter().enumerate() {
        ensure!(y < k, InvalidArgument, "label {y} out of range for {k} classes");
        m.set(i, y, 1.0);
    }
    Ok(m)
}
