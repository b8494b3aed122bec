use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{ensure, Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    /// Additive noise with sd `0.1 · severity · data_sd`.
    GaussianNoise,
    /// Each feature zeroed with probability `0.08 · severity`.
    FeatureDropout,
    /// `(1 − c)·x + c·smooth(x)` with `c = 0.1 · severity`.
    BlurMix,
}

impl Corruption {
    pub const ALL: [Corruption; 3] = [Corruption::GaussianNoise, Corruption::FeatureDropout, Corruption::BlurMix];

    /// The per-kind magnitude at a severity level.
    pub fn magnitude(self, severity: u8) -> f64 {
        let s = f64::from(severity);
        match self {
            Corruption::GaussianNoise => 0.1 * s,
            Corruption::FeatureDropout => 0.08 * s,
            Corruption::BlurMix => 0.1 * s,
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Corruption::GaussianNoise => "gaussian-noise",
            Corruption::FeatureDropout => "feature-dropout",
            Corruption::BlurMix => "blur-mix",
        })
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-noise" => Ok(Corruption::GaussianNoise),
            "feature-dropout" => Ok(Corruption::FeatureDropout),
            "blur-mix" => Ok(Corruption::BlurMix),
            other => Err(Error::InvalidArgument(format!(
                "unknown corruption kind '{other}' (expected gaussian-noise, feature-dropout or blur-mix)"
            ))),
        }
    }
}

/// Three-tap moving average along the feature axis, edges replicated.
fn smooth(row: &[f64]) -> Vec<f64> {
    let n = row.len();
    (0..n)
        .map(|j| {
            let l = row[j.saturating_sub(1)];
            let r = row[(j + 1).min(n - 1)];
            (l + row[j] + r) / 3.0
        })
        .collect()
}

fn global_sd(d: &Dataset) -> f64 {
    let xs = d.features.as_slice();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Shifted copy of `dataset`; labels, `N` and `K` are untouched.
pub fn corrupt(dataset: &Dataset, kind: Corruption, severity: u8, seed: u64) -> Result<Dataset> {
    ensure!(
        (1..=5).contains(&severity),
        InvalidArgument,
        "severity must be in 1..=5, got {severity}"
    );
    let mut r = rng::seeded(seed);
    let mut out = dataset.clone();
    let mag = kind.magnitude(severity);
    match kind {
        Corruption::GaussianNoise => {
            let sd = mag * global_sd(dataset);
            if sd > 0.0 {
                let normal = Normal::new(0.0, sd).expect("positive sd");
                for x in out.features.as_mut_slice() {
                    *x += normal.sample(&mut r);
                }
            }
        }
        Corruption::FeatureDropout => {
            for x in out.features.as_mut_slice() {
                if r.random::<f64>() < mag {
                    *x = 0.0;
                }
            }
        }
        Corruption::BlurMix => {
            for i in 0..out.features.rows() {
                let row = out.features.row_mut(i);
                let s = smooth(row);
                for (x, sx) in row.iter_mut().zip(s) {
                    *x = (1.0 - mag) * *x + mag * sx;
                }
            }
        }
    }
    Ok(out)
}
