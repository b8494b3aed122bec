use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use balcal::data::Corruption;
use balcal::experiment::{
    cmd_eval, cmd_ood_eval, cmd_report, cmd_shift_eval, cmd_sweep, cmd_train, sweep_path, EvalSplit, ExperimentConfig,
    SweepParam,
};
use balcal::posthoc::PosthocMode;
use balcal::train::{BetaPolicy, Method};

#[derive(Parser)]
#[command(name = "balcal", version, about = "Train and evaluate balanced-calibration classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and save checkpoints and histories.
    Train(Common),
    /// Evaluate trained checkpoints and write per-seed and aggregated results.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Split to score.
        #[arg(long, default_value = "test")]
        split: EvalSplit,
    },
    /// Vary one hyperparameter over a grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// beta, gamma, delta or alpha.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
    },
    /// Evaluate trained checkpoints under synthetic corruptions.
    ShiftEval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated corruption kinds (default: all).
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<Corruption>,
        /// Comma-separated severities in 1..=5 (default: all).
        #[arg(long, value_delimiter = ',')]
        severities: Vec<u8>,
    },
    /// Out-of-distribution detection scores of trained checkpoints.
    OodEval(Common),
    /// Aggregate result files into Markdown and JSON tables.
    Report {
        /// Output root holding the `results` directory.
        #[arg(long, env = "BALCAL_OUT_DIR", default_value = "balcal-out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    /// Preset name (blobs10, blobs100) or a labelled CSV file.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    ood_data: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds or a range `a..b`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    /// fixed-1, fixed-k or dynamic.
    #[arg(long)]
    beta_policy: Option<BetaPolicy>,
    /// Mixup Beta(α, α) parameter.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    label_noise: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Temperature scaling after training: per-branch (default) or log-fused.
    #[arg(long, num_args = 0..=1, default_missing_value = "per-branch")]
    posthoc: Option<PosthocMode>,
    /// Output root.
    #[arg(long, env = "BALCAL_OUT_DIR", default_value = "balcal-out")]
    out: PathBuf,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("seed range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("seed range end: {e}"))?;
        if a >= b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("seed '{p}': {e}")))
        .collect()
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path).map_err(|e| e.to_string())?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.method {
            cfg.method = v;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = &self.test_data {
            cfg.test_data = Some(v.clone());
        }
        if let Some(v) = &self.ood_data {
            cfg.ood_data = Some(v.clone());
        }
        if let Some(v) = self.seed {
            cfg.seeds = vec![v];
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = parse_seeds(v)?;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.beta_policy {
            cfg.beta_policy = Some(v);
        }
        if let Some(v) = self.alpha {
            cfg.alpha = Some(v);
        }
        if let Some(v) = self.bins {
            cfg.bins = v;
        }
        if let Some(v) = self.label_noise {
            cfg.label_noise = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = Some(v);
        }
        if let Some(v) = self.warmup_epochs {
            cfg.warmup_epochs = v;
        }
        if let Some(v) = self.posthoc {
            cfg.posthoc = Some(v);
        }
        cfg.out_dir = self.out.clone();
        Ok(cfg)
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn run(cli: Cli) -> Result<(), String> {
    let err = |e: balcal::Error| e.to_string();
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            for line in cmd_train(&cfg).map_err(err)? {
                println!("{line}");
            }
        }
        Command::Eval { common, split } => {
            let cfg = common.resolve()?;
            for r in cmd_eval(&cfg, split).map_err(err)? {
                let ts = r.ts_ece.map_or(String::new(), |e| format!(" (TS ECE {})", pct(e)));
                println!(
                    "{} {} seed {}: ACC {} ECE {}{ts} AECE {} NLL {:.4}",
                    r.method,
                    r.dataset,
                    r.seed,
                    pct(r.acc),
                    pct(r.ece),
                    pct(r.aece),
                    r.nll
                );
            }
            println!("results written to {}", cfg.out_dir.join("results").display());
        }
        Command::Sweep { common, param, grid } => {
            let cfg = common.resolve()?;
            let rows = cmd_sweep(&cfg, param, &grid).map_err(err)?;
            println!("{} sweep rows written to {}", rows.len(), sweep_path(&cfg, param).display());
        }
        Command::ShiftEval {
            common,
            kinds,
            severities,
        } => {
            let cfg = common.resolve()?;
            let kinds = if kinds.is_empty() { Corruption::ALL.to_vec() } else { kinds };
            let severities = if severities.is_empty() { vec![1, 2, 3, 4, 5] } else { severities };
            let rows = cmd_shift_eval(&cfg, &kinds, &severities).map_err(err)?;
            println!("{} shift rows written to {}", rows.len(), cfg.out_dir.join("shift").display());
        }
        Command::OodEval(common) => {
            let cfg = common.resolve()?;
            for r in cmd_ood_eval(&cfg).map_err(err)? {
                println!(
                    "{} {} seed {}: AUROC {} FPR95 {} out conf {:.4} out entropy {:.4}",
                    r.method,
                    r.dataset,
                    r.seed,
                    pct(r.auroc),
                    pct(r.fpr95),
                    r.out_conf,
                    r.out_entropy
                );
            }
        }
        Command::Report { out } => {
            let table = cmd_report(&out).map_err(err)?;
            println!(
                "report of {} methods x {} datasets written to {}",
                table.methods.len(),
                table.datasets.len(),
                out.join("report.md").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
