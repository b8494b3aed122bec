//! Temperature scaling, standalone and applied to a trained two-branch model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;
use crate::nn::{softmax_rows, LOG_FLOOR};
use crate::train::{fuse_matrices, Checkpoint};

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;
pub const T_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(t: f64) -> Result<Self> {
        ensure!(t > 0.0 && t.is_finite(), InvalidArgument, "temperature must be positive, got {t}");
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(t: f64) -> Result<Self> {
        Self::new(t)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// `softmax(logits / T)` row by row.
pub fn apply_temperature(logits: &Matrix, t: Temperature) -> Result<Matrix> {
    softmax_rows(&logits.scale(1.0 / t.0))
}

/// Mean negative log-likelihood of `softmax(logits / t)`, computed in log space.
pub fn scaled_nll(logits: &Matrix, labels: &[usize], t: f64) -> Result<f64> {
    ensure!(
        logits.rows() == labels.len(),
        Shape,
        "{} logit rows but {} labels",
        logits.rows(),
        labels.len()
    );
    ensure!(!labels.is_empty(), Empty, "no samples");
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        ensure!(y < row.len(), InvalidArgument, "label {y} out of range");
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse: f64 = row.iter().map(|&v| ((v - max) / t).exp()).sum::<f64>().ln();
        let log_p = (row[y] - max) / t - lse;
        total -= log_p.max(LOG_FLOOR.ln());
    }
    Ok(total / labels.len() as f64)
}

/// Fits the NLL-minimizing temperature by golden-section search on
/// `[T_MIN, T_MAX]`. Falls back to `T = 1` if the search result is not at
/// least as good.
pub fn fit_temperature(logits: &Matrix, labels: &[usize]) -> Result<Temperature> {
    let k = logits.cols();
    ensure!(
        labels.len() >= k,
        InvalidArgument,
        "temperature fitting needs at least K = {k} samples, got {}",
        labels.len()
    );
    ensure!(
        labels.iter().any(|&y| y != labels[0]),
        InvalidArgument,
        "temperature fitting needs labels from more than one class"
    );
    ensure!(logits.all_finite(), NonFinite, "logits contain non-finite values");

    let f = |t: f64| scaled_nll(logits, labels, t);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (T_MIN, T_MAX);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > T_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    let t = 0.5 * (a + b);
    if f(t)? <= f(1.0)? {
        Temperature::new(t)
    } else {
        Ok(Temperature::ONE)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosthocMode {
    /// One temperature per branch, fused afterwards with the stored γ.
    #[default]
    PerBranch,
    /// One temperature on the log of the fused probabilities.
    LogFused,
}

impl fmt::Display for PosthocMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosthocMode::PerBranch => "per-branch",
            PosthocMode::LogFused => "log-fused",
        })
    }
}

impl FromStr for PosthocMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-branch" => Ok(PosthocMode::PerBranch),
            "log-fused" => Ok(PosthocMode::LogFused),
            _ => Err(Error::InvalidArgument(format!(
                "unknown post-hoc mode '{s}' (expected per-branch or log-fused)"
            ))),
        }
    }
}

/// Fitted temperatures as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRecord {
    pub mode: PosthocMode,
    #[serde(rename = "T_sta", default, skip_serializing_if = "Option::is_none")]
    pub t_sta: Option<Temperature>,
    #[serde(rename = "T_etf", default, skip_serializing_if = "Option::is_none")]
    pub t_etf: Option<Temperature>,
    #[serde(rename = "T_fused", default, skip_serializing_if = "Option::is_none")]
    pub t_fused: Option<Temperature>,
}

impl TemperatureRecord {
    pub fn per_branch(t_sta: Temperature, t_etf: Temperature) -> Self {
        Self {
            mode: PosthocMode::PerBranch,
            t_sta: Some(t_sta),
            t_etf: Some(t_etf),
            t_fused: None,
        }
    }

    pub fn log_fused(t: Temperature) -> Self {
        Self {
            mode: PosthocMode::LogFused,
            t_sta: None,
            t_etf: None,
            t_fused: Some(t),
        }
    }
}

fn log_probs(p: &Matrix) -> Matrix {
    p.map(|v| v.max(LOG_FLOOR).ln())
}

/// Fits temperatures for a trained checkpoint on a validation set.
///
/// In per-branch mode a branch whose fusion weight is zero keeps `T = 1`.
pub fn posthoc_on_balcal(ckpt: &Checkpoint, val: Option<&Dataset>, mode: PosthocMode) -> Result<TemperatureRecord> {
    let val = val.ok_or_else(|| Error::InvalidArgument("post-hoc scaling needs a validation set".into()))?;
    let (l_sta, l_etf) = ckpt.model.logits(&val.features)?;
    let gamma = ckpt.best_gamma;
    match mode {
        PosthocMode::PerBranch => {
            let t_sta = if gamma > 0.0 {
                fit_temperature(&l_sta, &val.labels)?
            } else {
                Temperature::ONE
            };
            let t_etf = if gamma < 1.0 {
                fit_temperature(&l_etf, &val.labels)?
            } else {
                Temperature::ONE
            };
            Ok(TemperatureRecord::per_branch(t_sta, t_etf))
        }
        PosthocMode::LogFused => {
            let fused = fuse_matrices(&softmax_rows(&l_sta)?, &softmax_rows(&l_etf)?, gamma)?;
            Ok(TemperatureRecord::log_fused(fit_temperature(&log_probs(&fused), &val.labels)?))
        }
    }
}

/// Branch probabilities after per-branch scaling (unscaled for log-fused records).
pub fn scaled_branch_probs(ckpt: &Checkpoint, record: &TemperatureRecord, x: &Matrix) -> Result<(Matrix, Matrix)> {
    let (l_sta, l_etf) = ckpt.model.logits(x)?;
    Ok((
        apply_temperature(&l_sta, record.t_sta.unwrap_or(Temperature::ONE))?,
        apply_temperature(&l_etf, record.t_etf.unwrap_or(Temperature::ONE))?,
    ))
}

/// Final calibrated probabilities of a checkpoint under a temperature record.
pub fn calibrated_probs(ckpt: &Checkpoint, record: &TemperatureRecord, x: &Matrix) -> Result<Matrix> {
    let (p_sta, p_etf) = scaled_branch_probs(ckpt, record, x)?;
    let fused = fuse_matrices(&p_sta, &p_etf, ckpt.best_gamma)?;
    match record.mode {
        PosthocMode::PerBranch => Ok(fused),
        PosthocMode::LogFused => {
            let t = record
                .t_fused
                .ok_or_else(|| Error::InvalidArgument("log-fused record without T_fused".into()))?;
            apply_temperature(&log_probs(&fused), t)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::argmax;
    use crate::rng::seeded;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    /// Logits whose labels are drawn from softmax(logits), so T = 1 is the
    /// population NLL minimizer.
    fn calibrated_sample(n: usize, k: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut r = seeded(seed);
        let logits = Matrix::from_fn(n, k, |_, _| { let z: f64 = StandardNormal.sample(&mut r); 2.0 * z });
        let probs = softmax_rows(&logits).unwrap();
        let labels = (0..n)
            .map(|i| {
                let u: f64 = r.random();
                let mut acc = 0.0;
                for (j, &p) in probs.row(i).iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return j;
                    }
                }
                k - 1
            })
            .collect();
        (logits, labels)
    }

    #[test]
    fn calibrated_logits_fit_near_one() {
        let (logits, labels) = calibrated_sample(20_000, 5, 3);
        let t = fit_temperature(&logits, &labels).unwrap().value();
        assert!((0.95..=1.05).contains(&t), "T = {t}");
    }

    #[test]
    fn doubled_logits_fit_near_two() {
        let (logits, labels) = calibrated_sample(20_000, 5, 4);
        let t = fit_temperature(&logits.scale(2.0), &labels).unwrap().value();
        assert!((t - 2.0).abs() < 0.05, "T = {t}");
    }

    #[test]
    fn fitted_nll_never_worse_than_identity() {
        let (logits, labels) = calibrated_sample(300, 4, 9);
        let t = fit_temperature(&logits, &labels).unwrap().value();
        assert!(scaled_nll(&logits, &labels, t).unwrap() <= scaled_nll(&logits, &labels, 1.0).unwrap());
    }

    #[test]
    fn fit_is_deterministic() {
        let (logits, labels) = calibrated_sample(500, 3, 1);
        assert_eq!(
            fit_temperature(&logits, &labels).unwrap(),
            fit_temperature(&logits, &labels).unwrap()
        );
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let logits = Matrix::from_fn(10, 3, |i, j| (i + j) as f64);
        assert!(fit_temperature(&logits, &[1; 10]).is_err());
        assert!(fit_temperature(&Matrix::zeros(2, 3), &[0, 1]).is_err());
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
    }

    #[test]
    fn apply_temperature_definition_and_limits() {
        let logits = Matrix::from_rows(&[vec![1.0, -0.5, 3.0], vec![0.0, 0.2, 0.1]]).unwrap();
        assert_eq!(apply_temperature(&logits, Temperature::ONE).unwrap(), softmax_rows(&logits).unwrap());
        let half = apply_temperature(&logits, Temperature::new(0.5).unwrap()).unwrap();
        let doubled = softmax_rows(&logits.scale(2.0)).unwrap();
        for (a, b) in half.as_slice().iter().zip(doubled.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        let hot = apply_temperature(&logits, Temperature::new(1e6).unwrap()).unwrap();
        assert!(hot.as_slice().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-4));
    }

    #[test]
    fn temperature_preserves_argmax() {
        let (logits, _) = calibrated_sample(200, 6, 2);
        for t in [0.05, 0.3, 1.7, 20.0] {
            let p = apply_temperature(&logits, Temperature::new(t).unwrap()).unwrap();
            for i in 0..logits.rows() {
                assert_eq!(argmax(p.row(i)), argmax(logits.row(i)));
            }
        }
    }

    #[test]
    fn record_json_shape() {
        let rec = TemperatureRecord::per_branch(Temperature::new(1.5).unwrap(), Temperature::ONE);
        let v = serde_json::to_value(&rec).unwrap();
        assert_eq!(v, serde_json::json!({"mode": "per-branch", "T_sta": 1.5, "T_etf": 1.0}));
        let rec = TemperatureRecord::log_fused(Temperature::new(0.7).unwrap());
        let v = serde_json::to_value(&rec).unwrap();
        assert_eq!(v, serde_json::json!({"mode": "log-fused", "T_fused": 0.7}));
        assert!(serde_json::from_str::<TemperatureRecord>(r#"{"mode":"per-branch","T_sta":-1}"#).is_err());
    }
}
