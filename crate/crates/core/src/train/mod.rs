//! The balanced-calibration training loop.
//!
//! Each epoch trains the extractor, the learnable head and the adapter on
//! `γ_t·L_sta + (1 − γ_t)·L_etf`, saves every sample's pair of probability
//! vectors, and then picks `γ_{t+1}` so that fused training confidence
//! matches `δ ×` fused training accuracy.

mod fusion;
mod model;
mod runner;
mod search;

pub use fusion::{epoch_conf_acc, fuse_matrices, fused_probs, FusedPrediction, ProbPairLog};
pub use model::{Architecture, BalcalModel, ForwardPass, Losses};
pub use runner::{
    run_training, train_epoch, Checkpoint, EpochRecord, EpochStats, TrainConfig, TrainOutcome, TrainState, Trainer,
    ValLossSource,
};
pub use search::{etf_conf_acc, search_beta, search_gamma, BETA_MIN, GAMMA_TIE};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training variants, including the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Learnable head only.
    Vanilla,
    /// Learnable head + adapter + ETF, dynamic γ.
    Balcal,
    /// Vanilla with mixup augmentation.
    Mixup,
    #[serde(rename = "balcal+mixup")]
    BalcalMixup,
    /// ETF head only with a fixed β.
    EtfOnlyFixedBeta,
    /// ETF head only with β searched every epoch.
    EtfOnlyDynamicBeta,
    /// BalCAL with the ETF branch reading raw features.
    BalcalNoAdapter,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Vanilla,
        Method::Balcal,
        Method::Mixup,
        Method::BalcalMixup,
        Method::EtfOnlyFixedBeta,
        Method::EtfOnlyDynamicBeta,
        Method::BalcalNoAdapter,
    ];

    pub fn uses_mixup(self) -> bool {
        matches!(self, Method::Mixup | Method::BalcalMixup)
    }

    pub fn dynamic_gamma(self) -> bool {
        matches!(self, Method::Balcal | Method::BalcalMixup | Method::BalcalNoAdapter)
    }

    pub fn etf_only(self) -> bool {
        matches!(self, Method::EtfOnlyFixedBeta | Method::EtfOnlyDynamicBeta)
    }

    pub fn etf_branch(self) -> bool {
        !matches!(self, Method::Vanilla | Method::Mixup)
    }

    pub fn uses_adapter(self) -> bool {
        matches!(self, Method::Balcal | Method::BalcalMixup)
    }

    /// γ for the first epoch (and for every epoch when γ is not searched).
    pub fn initial_gamma(self) -> f64 {
        if self.dynamic_gamma() {
            0.5
        } else if self.etf_only() {
            0.0
        } else {
            1.0
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Balcal => "balcal",
            Method::Mixup => "mixup",
            Method::BalcalMixup => "balcal+mixup",
            Method::EtfOnlyFixedBeta => "etf-only-fixed-beta",
            Method::EtfOnlyDynamicBeta => "etf-only-dynamic-beta",
            Method::BalcalNoAdapter => "balcal-no-adapter",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
                Error::InvalidArgument(format!("unknown method '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaPolicy {
    /// β = 1, a relatively underconfident ETF branch for overconfident models.
    #[serde(rename = "fixed-1", alias = "fixed1")]
    Fixed1,
    /// β = K, a more confident ETF branch for underconfident (e.g. mixup) models.
    FixedK,
    /// β searched every epoch (ETF-only ablation).
    Dynamic,
}

impl BetaPolicy {
    /// `β = K` for mixup with `α > 0.1`; searched β for the dynamic ablation;
    /// `β = 1` otherwise.
    pub fn default_for(method: Method, mixup_alpha: Option<f64>) -> Self {
        match method {
            Method::EtfOnlyDynamicBeta => BetaPolicy::Dynamic,
            m if m.uses_mixup() && mixup_alpha.is_some_and(|a| a > 0.1) => BetaPolicy::FixedK,
            _ => BetaPolicy::Fixed1,
        }
    }
}

impl FromStr for BetaPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-1" | "1" => Ok(BetaPolicy::Fixed1),
            "fixed-k" | "fixed-K" | "k" | "K" => Ok(BetaPolicy::FixedK),
            "dynamic" => Ok(BetaPolicy::Dynamic),
            other => Err(Error::InvalidArgument(format!(
                "unknown beta policy '{other}' (expected fixed-1, fixed-k or dynamic)"
            ))),
        }
    }
}

/// Starting β for a policy. The dynamic policy starts at 1 and is then
/// driven by [`search_beta`].
pub fn select_beta(policy: BetaPolicy, k: usize) -> f64 {
    match policy {
        BetaPolicy::Fixed1 | BetaPolicy::Dynamic => 1.0,
        BetaPolicy::FixedK => k as f64,
    }
}
