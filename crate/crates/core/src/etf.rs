//! Fixed simplex equiangular tight frame (ETF) classifier.
//!
//! `M = β·√(K/(K−1))·U·(I − 11ᵀ/K)` where `U` is a `d×K` partial orthogonal
//! matrix. Every column of `M` has norm `β` and every pair of distinct columns
//! has cosine `−1/(K−1)`. `M` is never trained; `β` only rescales the logits, so
//! it moves confidence without moving the argmax.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::matrix::{dot, norm, vec_matmul, Matrix};
use crate::nn::softmax;
use crate::rng;

/// `d×K` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthogonalBasis {
    u: Matrix,
}

impl OrthogonalBasis {
    pub fn matrix(&self) -> &Matrix {
        &self.u
    }

    pub fn dim(&self) -> usize {
        self.u.rows()
    }

    pub fn k(&self) -> usize {
        self.u.cols()
    }

    /// Wraps an existing matrix after checking `UᵀU = I` (Frobenius residual < 1e-9).
    pub fn from_matrix(u: Matrix) -> Result<Self> {
        ensure!(u.cols() >= 2, InvalidArgument, "basis needs at least 2 columns");
        ensure!(
            u.rows() >= u.cols(),
            InvalidArgument,
            "basis needs d >= K, got d={} K={}",
            u.rows(),
            u.cols()
        );
        let residual = gram_residual(&u);
        ensure!(
            residual < 1e-9,
            InvalidArgument,
            "columns are not orthonormal (||UᵀU - I||_F = {residual:e})"
        );
        Ok(Self { u })
    }
}

fn gram_residual(u: &Matrix) -> f64 {
    let g = u.t_matmul(u).expect("square gram");
    g.sub(&Matrix::identity(u.cols())).expect("same shape").frobenius_norm()
}

/// Orthonormalizes a seeded standard-Gaussian `d×k` matrix.
///
/// Modified Gram–Schmidt with a second re-orthogonalization pass; equivalent to
/// the Q factor of a QR decomposition whose triangular factor has a positive
/// diagonal.
pub fn make_orthogonal_basis(d: usize, k: usize, seed: u64) -> Result<OrthogonalBasis> {
    ensure!(k >= 2, InvalidArgument, "need at least 2 classes, got {k}");
    ensure!(d >= k, InvalidArgument, "feature dimension {d} is smaller than class count {k}");

    let mut r = rng::seeded(seed);
    // Column-major scratch for the Gram-Schmidt sweep.
    let mut cols: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();

    for j in 0..k {
        for _pass in 0..2 {
            for i in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let proj = dot(&done[i], &rest[0]);
                for (x, q) in rest[0].iter_mut().zip(&done[i]) {
                    *x -= proj * q;
                }
            }
        }
        let n = norm(&cols[j]);
        ensure!(n > 1e-12, NonFinite, "degenerate Gaussian draw while orthonormalizing");
        cols[j].iter_mut().for_each(|x| *x /= n);
    }

    let u = Matrix::from_fn(d, k, |i, j| cols[j][i]);
    Ok(OrthogonalBasis { u })
}

/// The fixed classifier. Immutable once built; use [`EtfClassifier::with_beta`]
/// to get a rescaled copy.
#[derive(Clone, Debug, PartialEq)]
pub struct EtfClassifier {
    m: Matrix,
    beta: f64,
    basis: OrthogonalBasis,
    seed: Option<u64>,
}

pub fn build_etf(basis: OrthogonalBasis, beta: f64) -> Result<EtfClassifier> {
    ensure!(
        beta.is_finite() && beta > 0.0,
        InvalidArgument,
        "beta must be a positive finite number, got {beta}"
    );
    let k = basis.k();
    let scale = beta * scale_factor(k);
    let centered = centered_basis(basis.matrix());
    let m = centered.scale(scale);
    Ok(EtfClassifier {
        m,
        beta,
        basis,
        seed: None,
    })
}

/// `√(K/(K−1))`
pub fn scale_factor(k: usize) -> f64 {
    let k = k as f64;
    (k / (k - 1.0)).sqrt()
}

/// `U·(I − 11ᵀ/K)`: each column minus the mean column.
fn centered_basis(u: &Matrix) -> Matrix {
    let k = u.cols();
    Matrix::from_fn(u.rows(), k, |i, j| {
        let row = u.row(i);
        let mean = row.iter().sum::<f64>() / k as f64;
        row[j] - mean
    })
}

impl EtfClassifier {
    /// Builds from a seeded basis and records the seed for serialization.
    pub fn seeded(d: usize, k: usize, beta: f64, seed: u64) -> Result<Self> {
        let mut etf = build_etf(make_orthogonal_basis(d, k, seed)?, beta)?;
        etf.seed = Some(seed);
        Ok(etf)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn k(&self) -> usize {
        self.m.cols()
    }

    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    pub fn basis(&self) -> &OrthogonalBasis {
        &self.basis
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Same basis, different scaling factor.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        let mut etf = build_etf(self.basis.clone(), beta)?;
        etf.seed = self.seed;
        Ok(etf)
    }

    pub fn to_json(&self) -> EtfJson {
        EtfJson {
            d: self.dim(),
            k: self.k(),
            beta: self.beta,
            seed: self.seed,
            u: self.basis.u.as_slice().to_vec(),
            m: self.m.as_slice().to_vec(),
        }
    }

    /// Restores the stored arrays as-is and checks the geometry.
    pub fn from_json(rec: &EtfJson) -> Result<Self> {
        let u = Matrix::from_vec(rec.d, rec.k, rec.u.clone())?;
        let m = Matrix::from_vec(rec.d, rec.k, rec.m.clone())?;
        let basis = OrthogonalBasis::from_matrix(u)?;
        ensure!(
            rec.beta.is_finite() && rec.beta > 0.0,
            InvalidArgument,
            "stored beta {} is not positive",
            rec.beta
        );
        let report = verify_matrix(&m, basis.matrix(), rec.beta);
        ensure!(
            report.max_norm_deviation < 1e-9 && report.max_cosine_deviation < 1e-9,
            InvalidArgument,
            "stored ETF matrix violates simplex geometry: {report:?}"
        );
        Ok(Self {
            m,
            beta: rec.beta,
            basis,
            seed: rec.seed,
        })
    }
}

/// Serialized form: arrays are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtfJson {
    pub d: usize,
    pub k: usize,
    pub beta: f64,
    pub seed: Option<u64>,
    #[serde(rename = "U")]
    pub u: Vec<f64>,
    #[serde(rename = "M")]
    pub m: Vec<f64>,
}

impl Serialize for EtfClassifier {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for EtfClassifier {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = EtfJson::deserialize(d)?;
        EtfClassifier::from_json(&rec).map_err(serde::de::Error::custom)
    }
}

/// `z′·M`
pub fn etf_logits(features: &[f64], etf: &EtfClassifier) -> Result<Vec<f64>> {
    ensure!(
        features.len() == etf.dim(),
        Shape,
        "feature length {} does not match ETF dimension {}",
        features.len(),
        etf.dim()
    );
    vec_matmul(features, &etf.m)
}

/// Per-class scores `σ_i = z′·m̂_i`: the logits with the `β√(K/(K−1))` factor removed.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores(Vec<f64>);

impl ClassScores {
    pub fn new(sigma: Vec<f64>) -> Self {
        Self(sigma)
    }

    pub fn from_features(features: &[f64], etf: &EtfClassifier) -> Result<Self> {
        let logits = etf_logits(features, etf)?;
        let f = etf.beta * scale_factor(etf.k());
        Ok(Self(logits.into_iter().map(|l| l / f).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Softmax probabilities an ETF with scaling `beta` assigns to these scores.
    pub fn probabilities(&self, beta: f64) -> Vec<f64> {
        let f = beta * scale_factor(self.0.len());
        let logits: Vec<f64> = self.0.iter().map(|s| s * f).collect();
        softmax(&logits).expect("finite scores")
    }
}

/// `p_i / p_j = exp(β√(K/(K−1))(σ_i − σ_j))`
pub fn confidence_ratio(scores: &ClassScores, i: usize, j: usize, beta: f64, k: usize) -> Result<f64> {
    ensure!(i != j, InvalidArgument, "ratio of a class with itself (i = j = {i})");
    ensure!(
        i < scores.len() && j < scores.len(),
        InvalidArgument,
        "class index out of range for {} scores",
        scores.len()
    );
    ensure!(k >= 2, InvalidArgument, "need at least 2 classes");
    let s = scores.as_slice();
    Ok((beta * scale_factor(k) * (s[i] - s[j])).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GeometryReport {
    /// `max_i | ‖m_i‖ − β |`
    pub max_norm_deviation: f64,
    /// `max_{i≠j} | cos(m_i, m_j) + 1/(K−1) |`
    pub max_cosine_deviation: f64,
    /// `max | (UᵀU − I)_{ij} |`
    pub max_orthogonality_residual: f64,
}

impl GeometryReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_norm_deviation < tol
            && self.max_cosine_deviation < tol
            && self.max_orthogonality_residual < tol
    }
}

pub fn verify_etf(etf: &EtfClassifier) -> GeometryReport {
    verify_matrix(&etf.m, etf.basis.matrix(), etf.beta)
}

/// Geometry residuals of an arbitrary `M` against target norm `beta` and basis `u`.
pub fn verify_matrix(m: &Matrix, u: &Matrix, beta: f64) -> GeometryReport {
    let k = m.cols();
    let cols: Vec<Vec<f64>> = (0..k).map(|j| m.column(j)).collect();
    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let max_norm_deviation = norms
        .iter()
        .map(|n| (n - beta).abs())
        .fold(0.0, f64::max);

    let target = -1.0 / (k as f64 - 1.0);
    let mut max_cosine_deviation: f64 = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let cos = dot(&cols[i], &cols[j]) / (norms[i] * norms[j]);
            max_cosine_deviation = max_cosine_deviation.max((cos - target).abs());
        }
    }

    let g = u.t_matmul(u).expect("square gram");
    let mut max_orthogonality_residual: f64 = 0.0;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let expect = if i == j { 1.0 } else { 0.0 };
            max_orthogonality_residual = max_orthogonality_residual.max((g.get(i, j) - expect).abs());
        }
    }

    GeometryReport {
        max_norm_deviation,
        max_cosine_deviation,
        max_orthogonality_residual,
    }
}
