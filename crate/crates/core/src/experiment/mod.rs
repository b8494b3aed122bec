//! Experiment driver: configs, run layout on disk, per-seed evaluation rows
//! and the commands behind the `balcal` binary.

mod commands;
mod report;

pub use commands::{
    cmd_eval, cmd_ood_eval, cmd_shift_eval, cmd_sweep, cmd_train, ood_row, sweep_path, Aggregate, EvalSplit, OodRow,
    ShiftRow, SweepParam, SweepRow,
};
pub use report::{cmd_report, render_markdown, ReportTable};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, split, Dataset, DatasetPreset, SplitTag, Splits};
use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;
use crate::metrics::{accuracy, aece, ece, mean_confidence, mean_entropy, nll, PredictionSet, DEFAULT_BINS};
use crate::nn::OptimizerConfig;
use crate::posthoc::{calibrated_probs, posthoc_on_balcal, PosthocMode};
use crate::rng::{stream_seed, Stream};
use crate::train::{run_training, BetaPolicy, Checkpoint, Method, TrainConfig, TrainOutcome, ValLossSource};

/// Everything that determines a batch of runs. Missing JSON fields take the
/// defaults below; command-line flags override file values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// A preset name (`blobs10`, `blobs100`) or a path to a labelled CSV.
    pub dataset: String,
    /// Test CSV for file datasets; without it the validation split doubles as test set.
    pub test_data: Option<PathBuf>,
    /// Out-of-distribution CSV for file datasets.
    pub ood_data: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub delta: f64,
    pub beta_policy: Option<BetaPolicy>,
    pub alpha: Option<f64>,
    pub bins: usize,
    /// Fraction of labels flipped to a different class in every split.
    pub label_noise: f64,
    pub hidden: Vec<usize>,
    pub patience: Option<usize>,
    pub warmup_epochs: usize,
    pub val_loss: ValLossSource,
    pub posthoc: Option<PosthocMode>,
    /// Output root; deliberately left out of serialized configs so that
    /// identical runs in different directories produce identical files.
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            method: Method::Balcal,
            dataset: "blobs10".into(),
            test_data: None,
            ood_data: None,
            seeds: vec![0],
            epochs: t.epochs,
            lr: t.optimizer.lr,
            batch_size: t.batch_size,
            delta: t.delta,
            beta_policy: None,
            alpha: None,
            bins: DEFAULT_BINS,
            label_noise: 0.0,
            hidden: t.hidden,
            patience: t.patience,
            warmup_epochs: 0,
            val_loss: t.val_loss,
            posthoc: None,
            out_dir: PathBuf::from("balcal-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.seeds.is_empty(), InvalidArgument, "at least one seed is required");
        ensure!(self.bins >= 1, InvalidArgument, "bins must be at least 1");
        ensure!(
            (0.0..1.0).contains(&self.label_noise),
            InvalidArgument,
            "label noise must be in [0, 1), got {}",
            self.label_noise
        );
        self.train_config(self.seeds[0]).validate()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            method: self.method,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: OptimizerConfig::adam(self.lr),
            delta: self.delta,
            beta_policy: self.beta_policy,
            mixup_alpha: self.alpha,
            hidden: self.hidden.clone(),
            feature_dim: None,
            feature_act: TrainConfig::default().feature_act,
            seed,
            patience: self.patience,
            warmup_epochs: self.warmup_epochs,
            val_loss: self.val_loss,
        }
    }

    pub fn preset(&self) -> Option<DatasetPreset> {
        DatasetPreset::by_name(&self.dataset).ok()
    }

    /// Short dataset name used in file names and tables.
    pub fn dataset_name(&self) -> String {
        match self.preset() {
            Some(p) => p.name,
            None => Path::new(&self.dataset)
                .file_stem()
                .map_or_else(|| self.dataset.clone(), |s| s.to_string_lossy().into_owned()),
        }
    }

    /// Train/validation/test splits for one seed.
    pub fn load_splits(&self, seed: u64) -> Result<Splits> {
        let data_seed = stream_seed(seed, Stream::Data);
        if let Some(p) = self.preset() {
            return p.generate(data_seed, self.label_noise);
        }
        let path = Path::new(&self.dataset);
        ensure!(
            path.exists(),
            InvalidArgument,
            "dataset '{}' is neither a preset (blobs10, blobs100) nor an existing file",
            self.dataset
        );
        let full = load_csv(path, None)?.with_label_noise(self.label_noise, data_seed)?;
        let (train, val) = split(&full, 0.15, data_seed)?;
        let test = match &self.test_data {
            Some(t) => {
                let test = load_csv(t, Some(full.k))?.with_split(SplitTag::Test);
                ensure!(
                    test.input_dim() == full.input_dim(),
                    Shape,
                    "test data has {} features, training data {}",
                    test.input_dim(),
                    full.input_dim()
                );
                test
            }
            None => val.clone().with_split(SplitTag::Test),
        };
        Ok(Splits { train, val, test })
    }

    pub fn ood_set(&self, seed: u64) -> Result<Dataset> {
        if let Some(p) = self.preset() {
            return p.generate_ood(stream_seed(seed, Stream::Data));
        }
        match &self.ood_data {
            Some(path) => Ok(load_csv(path, None)?.with_split(SplitTag::Ood)),
            None => Err(Error::InvalidArgument(
                "file datasets need --ood-data for out-of-distribution evaluation".into(),
            )),
        }
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out_dir
            .join("runs")
            .join(self.method.as_str())
            .join(self.dataset_name())
            .join(format!("seed-{seed}"))
    }

    pub fn checkpoint_path(&self, seed: u64) -> PathBuf {
        self.run_dir(seed).join("checkpoint.json")
    }

    /// `<method>__<dataset>`, the stem of every per-config output file.
    pub fn stem(&self) -> String {
        format!("{}__{}", self.method.as_str(), self.dataset_name())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Trains one seed and returns the outcome together with the data it used.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(TrainOutcome, Splits)> {
    let splits = cfg.load_splits(seed)?;
    let mut outcome = run_training(&cfg.train_config(seed), &splits.train, &splits.val)?;
    let mut embedded = cfg.clone();
    embedded.seeds = vec![seed];
    outcome.checkpoint.experiment = Some(embedded.to_value());
    outcome.last.experiment = Some(embedded.to_value());
    Ok((outcome, splits))
}

/// Metrics of one model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub gamma: f64,
    pub acc: f64,
    pub ece: f64,
    pub aece: f64,
    pub nll: f64,
    pub conf: f64,
    pub entropy: f64,
    pub ts_acc: Option<f64>,
    pub ts_ece: Option<f64>,
    pub ts_aece: Option<f64>,
    pub ts_nll: Option<f64>,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSummary {
    pub acc: f64,
    pub ece: f64,
    pub aece: f64,
    pub nll: f64,
    pub conf: f64,
    pub entropy: f64,
}

pub fn summarize(probs: &Matrix, labels: &[usize], bins: usize) -> Result<MetricSummary> {
    let ps = PredictionSet::from_probs(probs, labels)?;
    Ok(MetricSummary {
        acc: accuracy(&ps)?,
        ece: ece(&ps, bins)?,
        aece: aece(&ps, bins)?,
        nll: nll(&ps)?,
        conf: mean_confidence(&ps)?,
        entropy: mean_entropy(&ps)?,
    })
}

/// Evaluates a checkpoint on `test`. With `posthoc`, temperatures are fitted
/// on `val`, stored in the checkpoint and the scaled metrics are filled in.
pub fn evaluate_checkpoint(
    ckpt: &mut Checkpoint,
    dataset: &str,
    val: &Dataset,
    test: &Dataset,
    bins: usize,
    posthoc: Option<PosthocMode>,
) -> Result<ResultRow> {
    ensure!(
        test.input_dim() == ckpt.model.arch.input_dim && test.k == ckpt.model.k(),
        Shape,
        "checkpoint expects {} features and {} classes, data has {} and {}",
        ckpt.model.arch.input_dim,
        ckpt.model.k(),
        test.input_dim(),
        test.k
    );
    let m = summarize(&ckpt.predict_fused(&test.features)?, &test.labels, bins)?;
    let mut row = ResultRow {
        method: ckpt.method.as_str().to_string(),
        dataset: dataset.to_string(),
        seed: ckpt.seed,
        gamma: ckpt.best_gamma,
        acc: m.acc,
        ece: m.ece,
        aece: m.aece,
        nll: m.nll,
        conf: m.conf,
        entropy: m.entropy,
        ts_acc: None,
        ts_ece: None,
        ts_aece: None,
        ts_nll: None,
        auroc: None,
        fpr95: None,
    };
    if let Some(mode) = posthoc {
        let record = posthoc_on_balcal(ckpt, Some(val), mode)?;
        let t = summarize(&calibrated_probs(ckpt, &record, &test.features)?, &test.labels, bins)?;
        row.ts_acc = Some(t.acc);
        row.ts_ece = Some(t.ece);
        row.ts_aece = Some(t.aece);
        row.ts_nll = Some(t.nll);
        ckpt.temperature = Some(record);
    }
    Ok(row)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub(crate) fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub(crate) fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))
}

/// Writes `<stem>.csv` plus a `<stem>.config.json` sidecar holding the
/// effective configuration.
pub(crate) fn write_csv_with_config<T: Serialize>(
    path: &Path,
    rows: &[T],
    config: &serde_json::Value,
) -> Result<()> {
    write_file(path, &csv_bytes(rows)?)?;
    write_json(&path.with_extension("config.json"), config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_values() {
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_defaults_fill_missing_fields() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"method": "vanilla", "seeds": [3, 4]}"#).unwrap();
        assert_eq!(cfg.method, Method::Vanilla);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.epochs, ExperimentConfig::default().epochs);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"metod": "vanilla"}"#).is_err());
    }

    #[test]
    fn config_round_trips_without_out_dir() {
        let cfg = ExperimentConfig {
            method: Method::BalcalMixup,
            alpha: Some(0.3),
            out_dir: "/somewhere".into(),
            ..ExperimentConfig::default()
        };
        let v = cfg.to_value();
        assert!(v.get("out_dir").is_none());
        let back: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, ExperimentConfig { out_dir: ExperimentConfig::default().out_dir, ..cfg });
    }

    #[test]
    fn validation_catches_method_specific_fields() {
        let cfg = ExperimentConfig {
            method: Method::Mixup,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig { seeds: vec![], ..ExperimentConfig::default() }.validate().is_err());
        assert!(ExperimentConfig { delta: 2.0, ..ExperimentConfig::default() }.validate().is_err());
    }

    #[test]
    fn run_layout() {
        let cfg = ExperimentConfig {
            out_dir: "out".into(),
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.checkpoint_path(7), PathBuf::from("out/runs/balcal/blobs10/seed-7/checkpoint.json"));
        assert_eq!(cfg.stem(), "balcal__blobs10");
        let file = ExperimentConfig {
            dataset: "data/train.csv".into(),
            ..ExperimentConfig::default()
        };
        assert_eq!(file.dataset_name(), "train");
    }
}
