use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    evaluate_checkpoint, mean_sd, summarize, train_seed, write_csv_with_config, write_file, write_json,
    ExperimentConfig, ResultRow,
};
use crate::data::{corrupt, Corruption, Dataset};
use crate::error::{ensure, Error, Result};
use crate::metrics::{auroc, fpr95, mean_confidence, mean_entropy, PredictionSet};
use crate::rng::{stream_seed, sub_seed, Stream};
use crate::train::{fuse_matrices, Checkpoint, TrainOutcome};

/// Trains every seed of `cfg`, writing `checkpoint.json` (best model) and
/// `history.jsonl` per run. Returns one summary line per seed.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let mut lines = Vec::new();
    for &seed in &cfg.seeds {
        let (outcome, _) = train_seed(cfg, seed)?;
        let dir = cfg.run_dir(seed);
        write_run(&dir, &outcome)?;
        lines.push(format!(
            "trained {} on {} (seed {seed}): {} epochs, best epoch {}, gamma {:.4}, val {:.4} -> {}",
            cfg.method,
            cfg.dataset_name(),
            outcome.history.len(),
            outcome.checkpoint.state.best_epoch,
            outcome.best_gamma,
            outcome.checkpoint.state.best_val,
            dir.display()
        ));
    }
    Ok(lines)
}

fn write_run(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    write_file(&dir.join("checkpoint.json"), outcome.checkpoint.to_json()?.as_bytes())?;
    let mut history = String::new();
    for rec in &outcome.history {
        history.push_str(&serde_json::to_string(rec)?);
        history.push('\n');
    }
    write_file(&dir.join("history.jsonl"), history.as_bytes())
}

fn load_checkpoint(cfg: &ExperimentConfig, seed: u64) -> Result<Checkpoint> {
    let path = cfg.checkpoint_path(seed);
    ensure!(
        path.exists(),
        InvalidArgument,
        "no checkpoint at {}; run `balcal train` with the same settings first",
        path.display()
    );
    Checkpoint::load(&path)
}

/// Which split `cmd_eval` scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
    #[default]
    Test,
}

impl FromStr for EvalSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split '{s}' (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub method: String,
    pub dataset: String,
    pub n: usize,
    pub metrics: Vec<(String, f64, f64)>,
}

fn aggregate(rows: &[ResultRow]) -> Aggregate {
    let col = |f: &dyn Fn(&ResultRow) -> Option<f64>| -> Option<(f64, f64)> {
        let xs: Vec<f64> = rows.iter().filter_map(f).collect();
        (xs.len() == rows.len()).then(|| mean_sd(&xs))
    };
    let fields: [(&str, &dyn Fn(&ResultRow) -> Option<f64>); 12] = [
        ("acc", &|r| Some(r.acc)),
        ("ece", &|r| Some(r.ece)),
        ("aece", &|r| Some(r.aece)),
        ("nll", &|r| Some(r.nll)),
        ("conf", &|r| Some(r.conf)),
        ("entropy", &|r| Some(r.entropy)),
        ("ts_acc", &|r| r.ts_acc),
        ("ts_ece", &|r| r.ts_ece),
        ("ts_aece", &|r| r.ts_aece),
        ("ts_nll", &|r| r.ts_nll),
        ("auroc", &|r| r.auroc),
        ("fpr95", &|r| r.fpr95),
    ];
    Aggregate {
        method: rows[0].method.clone(),
        dataset: rows[0].dataset.clone(),
        n: rows.len(),
        metrics: fields
            .iter()
            .filter_map(|(name, f)| col(*f).map(|(m, s)| (name.to_string(), m, s)))
            .collect(),
    }
}

#[derive(Serialize)]
struct AggregateFile<'a> {
    config: serde_json::Value,
    split: EvalSplit,
    rows: &'a [ResultRow],
    mean: serde_json::Map<String, serde_json::Value>,
    sd: serde_json::Map<String, serde_json::Value>,
}

/// Evaluates the trained checkpoint of every seed of `cfg` and writes
/// `results/<method>__<dataset>.{csv,json}`.
pub fn cmd_eval(cfg: &ExperimentConfig, split: EvalSplit) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut ckpt = load_checkpoint(cfg, seed)?;
        let splits = cfg.load_splits(seed)?;
        let data = match split {
            EvalSplit::Train => &splits.train,
            EvalSplit::Val => &splits.val,
            EvalSplit::Test => &splits.test,
        };
        let row = evaluate_checkpoint(&mut ckpt, &cfg.dataset_name(), &splits.val, data, cfg.bins, cfg.posthoc)?;
        if cfg.posthoc.is_some() {
            ckpt.save(&cfg.checkpoint_path(seed))?;
        }
        rows.push(row);
    }

    let agg = aggregate(&rows);
    let (mut mean, mut sd) = (serde_json::Map::new(), serde_json::Map::new());
    for (name, m, s) in &agg.metrics {
        mean.insert(name.clone(), serde_json::json!(m));
        sd.insert(name.clone(), serde_json::json!(s));
    }
    let suffix = match split {
        EvalSplit::Test => String::new(),
        other => format!(".{}", serde_json::to_value(other)?.as_str().unwrap_or_default()),
    };
    let base = cfg.out_dir.join("results").join(format!("{}{suffix}", cfg.stem()));
    write_file(&base.with_extension("csv"), &super::csv_bytes(&rows)?)?;
    write_json(
        &base.with_extension("json"),
        &AggregateFile {
            config: cfg.to_value(),
            split,
            rows: &rows,
            mean,
            sd,
        },
    )?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Beta,
    Gamma,
    Delta,
    Alpha,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Beta => "beta",
            SweepParam::Gamma => "gamma",
            SweepParam::Delta => "delta",
            SweepParam::Alpha => "alpha",
        })
    }
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepParam::Beta),
            "gamma" => Ok(SweepParam::Gamma),
            "delta" => Ok(SweepParam::Delta),
            "alpha" => Ok(SweepParam::Alpha),
            _ => Err(Error::InvalidArgument(format!(
                "unknown sweep parameter '{s}' (expected beta, gamma, delta or alpha)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub seed: u64,
    pub method: String,
    pub dataset: String,
    pub acc: f64,
    pub ece: f64,
    pub conf: f64,
    pub gamma: f64,
}

/// One row per (grid value, seed). `beta` and `gamma` rescale a frozen
/// trained model; `delta` and `alpha` retrain for every value.
pub fn cmd_sweep(cfg: &ExperimentConfig, param: SweepParam, grid: &[f64]) -> Result<Vec<SweepRow>> {
    ensure!(!grid.is_empty(), InvalidArgument, "sweep grid is empty");
    ensure!(grid.iter().all(|v| v.is_finite()), InvalidArgument, "sweep grid has non-finite values");
    cfg.validate()?;
    match param {
        SweepParam::Beta => {
            ensure!(
                cfg.method.etf_branch(),
                InvalidArgument,
                "a beta sweep needs a method with an ETF classifier, not {}",
                cfg.method
            );
            ensure!(grid.iter().all(|&b| b > 0.0), InvalidArgument, "beta values must be positive");
        }
        SweepParam::Gamma => {
            ensure!(
                cfg.method.etf_branch(),
                InvalidArgument,
                "a gamma sweep needs a method with two classifiers, not {}",
                cfg.method
            );
            ensure!(
                grid.iter().all(|g| (0.0..=1.0).contains(g)),
                InvalidArgument,
                "gamma values must lie in [0, 1]"
            );
        }
        SweepParam::Delta => ensure!(
            cfg.method.dynamic_gamma() || cfg.method == crate::train::Method::EtfOnlyDynamicBeta,
            InvalidArgument,
            "a delta sweep needs a dynamically balanced method, not {}",
            cfg.method
        ),
        SweepParam::Alpha => ensure!(
            cfg.method.uses_mixup(),
            InvalidArgument,
            "an alpha sweep needs a mixup method, not {}",
            cfg.method
        ),
    }

    let dataset = cfg.dataset_name();
    let mut rows = Vec::new();
    let mut push = |value: f64, seed: u64, probs: &crate::Matrix, test: &Dataset, gamma: f64| -> Result<()> {
        let m = summarize(probs, &test.labels, cfg.bins)?;
        rows.push(SweepRow {
            parameter: param.to_string(),
            value,
            seed,
            method: cfg.method.as_str().into(),
            dataset: dataset.clone(),
            acc: m.acc,
            ece: m.ece,
            conf: m.conf,
            gamma,
        });
        Ok(())
    };
    match param {
        SweepParam::Beta | SweepParam::Gamma => {
            let mut frozen = Vec::new();
            for &seed in &cfg.seeds {
                let (outcome, splits) = train_seed(cfg, seed)?;
                frozen.push((seed, outcome.checkpoint, splits.test));
            }
            for &v in grid {
                for (seed, ckpt, test) in &frozen {
                    let mut ckpt = ckpt.clone();
                    if param == SweepParam::Beta {
                        ckpt.model.set_beta(v)?;
                    } else {
                        ckpt.best_gamma = v;
                    }
                    let (p_sta, p_etf) = ckpt.model.predict(&test.features)?;
                    let probs = fuse_matrices(&p_sta, &p_etf, ckpt.best_gamma)?;
                    push(v, *seed, &probs, test, ckpt.best_gamma)?;
                }
            }
        }
        SweepParam::Delta | SweepParam::Alpha => {
            for &v in grid {
                let mut c = cfg.clone();
                if param == SweepParam::Delta {
                    c.delta = v;
                } else {
                    c.alpha = Some(v);
                }
                c.validate()?;
                for &seed in &cfg.seeds {
                    let (outcome, splits) = train_seed(&c, seed)?;
                    let probs = outcome.checkpoint.predict_fused(&splits.test.features)?;
                    push(v, seed, &probs, &splits.test, outcome.best_gamma)?;
                }
            }
        }
    }
    let path = sweep_path(cfg, param);
    let mut config = cfg.to_value();
    config["sweep"] = serde_json::json!({"parameter": param.to_string(), "grid": grid});
    write_csv_with_config(&path, &rows, &config)?;
    Ok(rows)
}

pub fn sweep_path(cfg: &ExperimentConfig, param: SweepParam) -> PathBuf {
    cfg.out_dir.join("sweeps").join(format!("{param}__{}.csv", cfg.stem()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub kind: String,
    pub severity: u8,
    pub acc: f64,
    pub ece: f64,
    pub conf: f64,
}

/// Scores every trained seed on corrupted copies of its test set.
pub fn cmd_shift_eval(cfg: &ExperimentConfig, kinds: &[Corruption], severities: &[u8]) -> Result<Vec<ShiftRow>> {
    ensure!(!kinds.is_empty() && !severities.is_empty(), InvalidArgument, "no corruption kinds or severities");
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ckpt = load_checkpoint(cfg, seed)?;
        let test = cfg.load_splits(seed)?.test;
        for &kind in kinds {
            for &severity in severities {
                let salt = 16 * (Corruption::ALL.iter().position(|&c| c == kind).unwrap_or(0) as u64) + u64::from(severity);
                let shifted = corrupt(&test, kind, severity, sub_seed(stream_seed(seed, Stream::Corruption), salt))?;
                let m = summarize(&ckpt.predict_fused(&shifted.features)?, &shifted.labels, cfg.bins)?;
                rows.push(ShiftRow {
                    method: cfg.method.as_str().into(),
                    dataset: cfg.dataset_name(),
                    seed,
                    kind: kind.to_string(),
                    severity,
                    acc: m.acc,
                    ece: m.ece,
                    conf: m.conf,
                });
            }
        }
    }
    let path = cfg.out_dir.join("shift").join(format!("{}.csv", cfg.stem()));
    let mut config = cfg.to_value();
    config["shift"] = serde_json::json!({
        "kinds": kinds.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "severities": severities,
    });
    write_csv_with_config(&path, &rows, &config)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub auroc: f64,
    pub fpr95: f64,
    pub in_conf: f64,
    pub in_entropy: f64,
    pub out_conf: f64,
    pub out_entropy: f64,
}

/// In-distribution test set vs. the out-of-distribution set, scored by
/// fused maximum probability.
pub fn ood_row(ckpt: &Checkpoint, dataset: &str, in_set: &Dataset, out_set: &Dataset) -> Result<OodRow> {
    ensure!(
        in_set.input_dim() == out_set.input_dim(),
        Shape,
        "in-distribution width {} vs out-of-distribution width {}",
        in_set.input_dim(),
        out_set.input_dim()
    );
    let p_in = PredictionSet::from_probs(&ckpt.predict_fused(&in_set.features)?, &in_set.labels)?;
    // out-of-distribution labels carry no meaning; only confidences are used
    let p_out = PredictionSet::from_probs(&ckpt.predict_fused(&out_set.features)?, &vec![0; out_set.len()])?;
    let (s_in, s_out) = (p_in.confidences(), p_out.confidences());
    Ok(OodRow {
        method: ckpt.method.as_str().into(),
        dataset: dataset.into(),
        seed: ckpt.seed,
        auroc: auroc(&s_in, &s_out)?,
        fpr95: fpr95(&s_in, &s_out)?,
        in_conf: mean_confidence(&p_in)?,
        in_entropy: mean_entropy(&p_in)?,
        out_conf: mean_confidence(&p_out)?,
        out_entropy: mean_entropy(&p_out)?,
    })
}

pub fn cmd_ood_eval(cfg: &ExperimentConfig) -> Result<Vec<OodRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ckpt = load_checkpoint(cfg, seed)?;
        let test = cfg.load_splits(seed)?.test;
        rows.push(ood_row(&ckpt, &cfg.dataset_name(), &test, &cfg.ood_set(seed)?)?);
    }
    let path = cfg.out_dir.join("ood").join(format!("{}.csv", cfg.stem()));
    write_csv_with_config(&path, &rows, &cfg.to_value())?;
    Ok(rows)
}
