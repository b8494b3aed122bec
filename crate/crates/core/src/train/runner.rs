use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::fusion::{epoch_conf_acc, fuse_matrices, ProbPairLog};
use super::model::{Architecture, BalcalModel};
use super::search::{search_beta, search_gamma};
use super::{select_beta, BetaPolicy, Method};
use crate::data::{mixup_batch, Dataset};
use crate::error::{ensure, Error, Result};
use crate::metrics::{nll, PredictionSet};
use crate::nn::{Activation, Optimizer, OptimizerConfig, Parameterized};
use crate::posthoc::TemperatureRecord;
use crate::rng::{self, stream_seed, sub_seed, Stream};

fn default_feature_act() -> Activation {
    Activation::Tanh
}

/// Which probabilities the validation loss (model selection) is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValLossSource {
    Fused,
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub delta: f64,
    /// `None` resolves through [`BetaPolicy::default_for`].
    pub beta_policy: Option<BetaPolicy>,
    pub mixup_alpha: Option<f64>,
    pub hidden: Vec<usize>,
    /// `None` means `max(16, K)`.
    pub feature_dim: Option<usize>,
    /// Nonlinearity on the extractor's output layer.
    #[serde(default = "default_feature_act")]
    pub feature_act: Activation,
    pub seed: u64,
    /// Early-stopping patience in epochs; `None` trains for all epochs.
    pub patience: Option<usize>,
    /// Epochs to hold γ at its initial value before searching.
    pub warmup_epochs: usize,
    pub val_loss: ValLossSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Balcal,
            epochs: 100,
            batch_size: 128,
            optimizer: OptimizerConfig::default(),
            delta: 0.95,
            beta_policy: None,
            mixup_alpha: None,
            hidden: vec![64, 64],
            feature_dim: None,
            feature_act: default_feature_act(),
            seed: 0,
            patience: Some(15),
            warmup_epochs: 0,
            val_loss: ValLossSource::Fused,
        }
    }
}

impl TrainConfig {
    pub fn resolved_beta_policy(&self) -> BetaPolicy {
        self.beta_policy
            .unwrap_or_else(|| BetaPolicy::default_for(self.method, self.mixup_alpha))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, InvalidArgument, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, InvalidArgument, "batch size must be at least 1");
        ensure!(
            self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite(),
            InvalidArgument,
            "learning rate must be positive"
        );
        ensure!(
            self.delta > 0.0 && self.delta < 2.0,
            InvalidArgument,
            "delta {} outside the allowed range (0, 2); recommended [0.91, 0.99]",
            self.delta
        );
        if !(0.91..=0.99).contains(&self.delta) {
            warn!("delta {} is outside the recommended range [0.91, 0.99]", self.delta);
        }
        if self.method.uses_mixup() {
            match self.mixup_alpha {
                Some(a) if a > 0.0 && a.is_finite() => {}
                Some(a) => return Err(Error::InvalidArgument(format!("mixup alpha must be positive, got {a}"))),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "method {} requires a mixup alpha",
                        self.method
                    )))
                }
            }
        }
        if self.resolved_beta_policy() == BetaPolicy::Dynamic {
            ensure!(
                self.method == Method::EtfOnlyDynamicBeta,
                InvalidArgument,
                "the dynamic beta policy only applies to etf-only-dynamic-beta"
            );
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize, k: usize) -> Architecture {
        let mut arch = Architecture::desk(input_dim, k);
        arch.hidden = self.hidden.clone();
        if let Some(d) = self.feature_dim {
            arch.feature_dim = d;
        }
        arch.feature_act = self.feature_act;
        arch.use_adapter = self.method.uses_adapter();
        arch
    }
}

/// Per-run γ/β bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// γ used for the next epoch.
    pub gamma_t: f64,
    pub delta: f64,
    pub beta_policy: BetaPolicy,
    pub beta: f64,
    /// Epochs completed.
    pub epoch: usize,
    /// γ paired with the best model so far.
    pub best_gamma: f64,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_since_best: usize,
}

/// One line of the history file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// γ used during this epoch.
    pub gamma: f64,
    /// Result of this epoch's γ search, if one ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_next: Option<f64>,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_next: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_sta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_etf: Option<f64>,
    pub loss_total: f64,
    pub train_conf: f64,
    pub train_acc: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub loss_sta: f64,
    pub loss_etf: f64,
    pub loss_total: f64,
    pub log: ProbPairLog,
}

/// Trained (or in-progress) model with everything needed to resume or evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub method: Method,
    pub seed: u64,
    #[serde(flatten)]
    pub model: BalcalModel,
    pub optimizer: Optimizer,
    pub best_gamma: f64,
    pub state: TrainState,
    pub config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<TemperatureRecord>,
    /// Free-form experiment description embedded by the driver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Fused probabilities at the stored γ.
    pub fn predict_fused(&self, x: &crate::Matrix) -> Result<crate::Matrix> {
        let (p_sta, p_etf) = self.model.predict(x)?;
        fuse_matrices(&p_sta, &p_etf, self.best_gamma)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The model with the best validation metric, paired with its γ.
    pub checkpoint: Checkpoint,
    /// The model after the last epoch that ran.
    pub last: Checkpoint,
    pub best_gamma: f64,
    pub history: Vec<EpochRecord>,
}

/// Runs one epoch of mini-batch training at a fixed `gamma`.
///
/// Probability pairs are logged from each batch's pre-update forward pass.
/// Under mixup the loss is computed on mixed inputs and the logged pairs come
/// from the clean batch at the same parameters.
pub fn train_epoch(
    model: &mut BalcalModel,
    optimizer: &mut Optimizer,
    train: &Dataset,
    gamma: f64,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    ensure!((0.0..=1.0).contains(&gamma), InvalidArgument, "gamma {gamma} outside [0, 1]");
    ensure!(!train.is_empty(), Empty, "training set is empty");
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng::seeded(sub_seed(stream_seed(config.seed, Stream::Shuffle), epoch as u64)));
    let mut mix_rng = rng::seeded(sub_seed(stream_seed(config.seed, Stream::Mixup), epoch as u64));

    let mut log = ProbPairLog::new(model.k(), model.etf.beta());
    let (mut sum_sta, mut sum_etf, mut sum_total) = (0.0, 0.0, 0.0);
    for (b, idx) in order.chunks(config.batch_size).enumerate() {
        let x = train.features.select_rows(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let y = crate::nn::one_hot(&labels, model.k())?;

        let clean = model.forward(&x)?;
        log.push_batch(&clean.p_sta, &clean.p_etf, &clean.logits_etf, &labels)?;

        let (pass, targets) = if config.method.uses_mixup() {
            let alpha = config.mixup_alpha.expect("validated");
            let mut partner: Vec<usize> = (0..idx.len()).collect();
            partner.shuffle(&mut mix_rng);
            let xp = x.select_rows(&partner);
            let yp = y.select_rows(&partner);
            let mixed = mixup_batch(&x, &y, &xp, &yp, alpha, &mut mix_rng)?;
            (model.forward(&mixed.features)?, mixed.soft_labels)
        } else {
            (clean, y)
        };

        let losses = model.losses(&pass, &targets, gamma)?;
        if !(losses.sta.is_finite() && losses.etf.is_finite()) {
            return Err(Error::NonFinite(format!(
                "epoch {epoch} batch {b}: loss_sta={} loss_etf={} gamma={gamma}",
                losses.sta, losses.etf
            )));
        }
        let grads = model.backward(&pass, &targets, gamma)?;
        optimizer.step(model.params_mut(), &grads).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch} batch {b}: {msg}")),
            other => other,
        })?;

        let w = idx.len() as f64;
        sum_sta += w * losses.sta;
        sum_etf += w * losses.etf;
        sum_total += w * losses.total;
    }
    let n = train.len() as f64;
    Ok(EpochStats {
        loss_sta: sum_sta / n,
        loss_etf: sum_etf / n,
        loss_total: sum_total / n,
        log,
    })
}

/// Epoch-by-epoch driver; can be checkpointed and resumed bit-exactly.
pub struct Trainer {
    pub model: BalcalModel,
    pub optimizer: Optimizer,
    pub state: TrainState,
    pub config: TrainConfig,
    best: Option<(BalcalModel, Optimizer)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, input_dim: usize, k: usize) -> Result<Self> {
        config.validate()?;
        let policy = config.resolved_beta_policy();
        let beta = select_beta(policy, k);
        let model = BalcalModel::new(config.architecture(input_dim, k), beta, config.seed)?;
        let gamma = config.method.initial_gamma();
        Ok(Self {
            model,
            optimizer: Optimizer::new(config.optimizer),
            state: TrainState {
                gamma_t: gamma,
                delta: config.delta,
                beta_policy: policy,
                beta,
                epoch: 0,
                best_gamma: gamma,
                best_epoch: 0,
                best_val: f64::INFINITY,
                epochs_since_best: 0,
            },
            config,
            best: None,
        })
    }

    /// Resumes from a checkpoint taken with [`Trainer::checkpoint_last`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self {
            model: ckpt.model.clone(),
            optimizer: ckpt.optimizer.clone(),
            state: ckpt.state.clone(),
            config: ckpt.config.clone(),
            best: None,
        }
    }

    pub fn should_stop(&self) -> bool {
        self.state.epoch >= self.config.epochs
            || self
                .config
                .patience
                .is_some_and(|p| self.state.epochs_since_best > p)
    }

    fn val_metric(&self, val: &Dataset, gamma: f64) -> Result<f64> {
        let (p_sta, p_etf) = self.model.predict(&val.features)?;
        let probs = match self.config.val_loss {
            ValLossSource::Standard if !self.config.method.etf_only() => p_sta,
            _ => fuse_matrices(&p_sta, &p_etf, gamma)?,
        };
        nll(&PredictionSet::from_probs(&probs, &val.labels)?)
    }

    pub fn step_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochRecord> {
        let epoch = self.state.epoch + 1;
        let gamma = self.state.gamma_t;
        let beta = self.model.etf.beta();
        let stats = train_epoch(&mut self.model, &mut self.optimizer, train, gamma, &self.config, epoch)?;
        let (train_conf, train_acc) = epoch_conf_acc(&stats.log, gamma)?;

        let method = self.config.method;
        let gamma_next = if method.dynamic_gamma() && epoch > self.config.warmup_epochs {
            Some(search_gamma(&stats.log, self.config.delta)?)
        } else {
            None
        };
        if let Some(g) = gamma_next {
            self.state.gamma_t = g;
        }
        let beta_next = if self.state.beta_policy == BetaPolicy::Dynamic {
            let b = search_beta(&stats.log, self.config.delta, self.model.k())?;
            self.model.set_beta(b)?;
            self.state.beta = b;
            Some(b)
        } else {
            None
        };

        // the model as it stands now is paired with the γ it will be evaluated with
        let eval_gamma = self.state.gamma_t;
        let val_metric = self.val_metric(val, eval_gamma)?;
        self.state.epoch = epoch;
        if val_metric < self.state.best_val {
            self.state.best_val = val_metric;
            self.state.best_gamma = eval_gamma;
            self.state.best_epoch = epoch;
            self.state.epochs_since_best = 0;
            self.best = Some((self.model.clone(), self.optimizer.clone()));
        } else {
            self.state.epochs_since_best += 1;
        }

        let record = EpochRecord {
            epoch,
            gamma,
            gamma_next,
            beta,
            beta_next,
            loss_sta: (!method.etf_only()).then_some(stats.loss_sta),
            loss_etf: method.etf_branch().then_some(stats.loss_etf),
            loss_total: stats.loss_total,
            train_conf,
            train_acc,
            val_metric,
        };
        info!(
            "epoch {epoch}: loss {:.4} conf {:.4} acc {:.4} gamma {gamma:.4} -> {eval_gamma:.4} val {val_metric:.4}",
            record.loss_total, train_conf, train_acc
        );
        Ok(record)
    }

    fn checkpoint_of(&self, model: &BalcalModel, optimizer: &Optimizer, gamma: f64) -> Checkpoint {
        Checkpoint {
            method: self.config.method,
            seed: self.config.seed,
            model: model.clone(),
            optimizer: optimizer.clone(),
            best_gamma: gamma,
            state: self.state.clone(),
            config: self.config.clone(),
            temperature: None,
            experiment: None,
        }
    }

    pub fn checkpoint_last(&self) -> Checkpoint {
        self.checkpoint_of(&self.model, &self.optimizer, self.state.gamma_t)
    }

    pub fn checkpoint_best(&self) -> Checkpoint {
        match &self.best {
            Some((m, o)) => self.checkpoint_of(m, o, self.state.best_gamma),
            None => self.checkpoint_last(),
        }
    }
}

/// Full training run: epochs until the budget or early stopping, keeping the
/// model with the lowest validation metric together with its γ.
pub fn run_training(config: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    ensure!(
        train.k == val.k && train.input_dim() == val.input_dim(),
        Shape,
        "train and validation sets disagree on shape"
    );
    let mut trainer = Trainer::new(config.clone(), train.input_dim(), train.k)?;
    let mut history = Vec::with_capacity(config.epochs);
    while !trainer.should_stop() {
        history.push(trainer.step_epoch(train, val)?);
    }
    let checkpoint = trainer.checkpoint_best();
    Ok(TrainOutcome {
        best_gamma: checkpoint.best_gamma,
        last: trainer.checkpoint_last(),
        checkpoint,
        history,
    })
}
