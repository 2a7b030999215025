//! Command-line front end: `partition`, `run` and `battery`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dataset::{
    label_distribution, load_dataset, make_synthetic, partition, partition_report_csv, save_dataset,
    LabeledDataset, PartitionSpec, SplitMode,
};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::seed::child_seed;
use crate::selection::Strategy;
use crate::server::{
    moving_average, parse_synthetic, run_experiment, sampling_occasions, DataSource, ExperimentConfig, RoundRecord,
};

#[derive(Debug, Parser)]
#[command(name = "fedclf", version, about = "Federated-learning participant-selection simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

// parsed once per process, so the size of `RunArgs` does not matter
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Partition a dataset across clients and report per-client EMD.
    Partition(PartitionArgs),
    /// Run one federated experiment.
    Run(RunArgs),
    /// Run a strategy x dataset x seed grid and write comparison tables.
    Battery(BatteryArgs),
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    /// Synthesise `CxFxN` data: C classes, F features, N samples per class.
    #[arg(long, conflicts_with = "input")]
    pub synthetic: Option<String>,
    /// Read a FEDDS dataset file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Shard size.
    #[arg(long = "S")]
    pub shard_size: usize,
    #[arg(long)]
    pub clients: usize,
    #[arg(long, alias = "split", default_value = "equal")]
    pub mode: SplitMode,
    #[arg(long, default_value_t = PartitionSpec::DEFAULT_MIN_FRACTION)]
    pub min_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "partition-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct RunArgs {
    /// Flat `key=value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub select_k: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// `softmax` or `mlp:<hidden>`.
    #[arg(long)]
    pub model: Option<String>,
    /// fedclf, rawloss, random, oort, newt or gradnorm.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// loss or acc.
    #[arg(long)]
    pub factor_mode: Option<String>,
    /// latest or compounding.
    #[arg(long)]
    pub calibration: Option<String>,
    #[arg(long)]
    pub no_feedback: bool,
    #[arg(long)]
    pub no_warmup: bool,
    #[arg(long = "S")]
    pub shard_size: Option<usize>,
    #[arg(long, alias = "mode")]
    pub split: Option<SplitMode>,
    #[arg(long)]
    pub min_fraction: Option<f64>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic data as `CxFxN` (N samples per class).
    #[arg(long, conflicts_with = "data")]
    pub synthetic: Option<String>,
    /// FEDDS dataset file; a stratified sixth is held out for testing.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, default_value = "run-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BatteryArgs {
    /// Battery spec: config keys plus `strategies=`, `datasets=` and `seeds=`.
    pub spec: PathBuf,
    #[arg(long, default_value = "battery-out")]
    pub out: PathBuf,
}

pub fn run_cli(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Partition(a) => cmd_partition(&a).map(|_| ()),
        Command::Run(a) => {
            let history = cmd_run(&a)?;
            let last = history.last().expect("at least one round");
            println!(
                "rounds={} final_ma={} sampling_occasions={} out={}",
                history.len(),
                last.moving_avg_accuracy,
                sampling_occasions(&history),
                a.out.display()
            );
            Ok(())
        }
        Command::Battery(a) => {
            let rows = cmd_battery(&a)?;
            println!("battery rows={} out={}", rows.len(), a.out.display());
            Ok(())
        }
    }
}

/// Writes one `client_XXX.fedds` per client and `partition_report.csv`. Returns the mean EMD.
pub fn cmd_partition(args: &PartitionArgs) -> Result<f64> {
    let data: LabeledDataset = match (&args.synthetic, &args.input) {
        (Some(spec), None) => match parse_synthetic(spec)? {
            DataSource::Synthetic {
                classes,
                features,
                per_class,
            } => make_synthetic(classes * per_class, features, classes, child_seed(args.seed, "data", 0)),
            DataSource::File(_) => unreachable!("parse_synthetic yields synthetic sources"),
        },
        (None, Some(path)) => load_dataset(path)?,
        _ => return Err(Error::Config("give exactly one of --synthetic or --input".into())),
    };
    let spec = PartitionSpec {
        shard_size: args.shard_size,
        split_mode: args.mode,
        num_clients: args.clients,
        min_fraction: args.min_fraction,
        seed: child_seed(args.seed, "partition", 0),
    };
    let clients = partition(&data, &spec)?;
    let reference = label_distribution(&data)?;
    let report = partition_report_csv(&clients, &reference)?;

    fs::create_dir_all(&args.out)?;
    let width = (clients.len().saturating_sub(1)).to_string().len().max(3);
    for c in &clients {
        save_dataset(args.out.join(format!("client_{:0width$}.fedds", c.client_id)), &c.data)?;
    }
    fs::write(args.out.join("partition_report.csv"), &report)?;
    crate::dataset::mean_partition_emd(&clients, &reference)
}

/// Builds the experiment config from defaults, the optional file, then flags.
pub fn resolve_run_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(&fs::read_to_string(path)?)?;
    }
    let mut set = |k: &str, v: Option<String>| -> Result<()> {
        match v {
            Some(v) => cfg.set(k, &v),
            None => Ok(()),
        }
    };
    set("clients", args.clients.map(|v| v.to_string()))?;
    set("select-k", args.select_k.map(|v| v.to_string()))?;
    set("rounds", args.rounds.map(|v| v.to_string()))?;
    set("epochs", args.epochs.map(|v| v.to_string()))?;
    set("lr", args.lr.map(|v| v.to_string()))?;
    set("batch", args.batch.map(|v| v.to_string()))?;
    set("model", args.model.clone())?;
    set("strategy", args.strategy.map(|v| v.to_string()))?;
    set("factor-mode", args.factor_mode.clone())?;
    set("calibration", args.calibration.clone())?;
    set("S", args.shard_size.map(|v| v.to_string()))?;
    set("split", args.split.map(|v| v.to_string()))?;
    set("min-fraction", args.min_fraction.map(|v| v.to_string()))?;
    set("window", args.window.map(|v| v.to_string()))?;
    set("seed", args.seed.map(|v| v.to_string()))?;
    set("synthetic", args.synthetic.clone())?;
    set("data", args.data.as_ref().map(|p| p.display().to_string()))?;
    set("checkpoint-every", args.checkpoint_every.map(|v| v.to_string()))?;
    if args.no_feedback {
        cfg.feedback_enabled = false;
    }
    if args.no_warmup {
        cfg.warmup = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_run(args: &RunArgs) -> Result<Vec<RoundRecord>> {
    let cfg = resolve_run_config(args)?;
    run_experiment(&cfg, Some(&args.out), Executor::from_env()?)
}

/// A named partition setting, e.g. `NIID-S50-NE`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetVariant {
    pub name: String,
    pub shard_size: usize,
    pub split_mode: SplitMode,
}

impl DatasetVariant {
    /// Accepts `IID-E`, `IID-NE`, `NIID-S<n>-E`, `NIID-S<n>-NE` (the `NIID-` prefix is optional).
    pub fn parse(name: &str) -> Result<Self> {
        let upper = name.trim().to_ascii_uppercase();
        let bad = || Error::Config(format!("dataset `{name}` is not IID-E/NE or NIID-S<n>-E/NE"));
        let (body, split_mode) = if let Some(b) = upper.strip_suffix("-NE") {
            (b, SplitMode::NonEqual)
        } else if let Some(b) = upper.strip_suffix("-E") {
            (b, SplitMode::Equal)
        } else {
            return Err(bad());
        };
        let shard_size = if body == "IID" {
            1
        } else {
            body.trim_start_matches("NIID-")
                .strip_prefix('S')
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&s| s > 0)
                .ok_or_else(bad)?
        };
        Ok(Self {
            name: upper,
            shard_size,
            split_mode,
        })
    }
}

/// A strategy plus its feedback setting, e.g. `fedclf`, `fedclf-nofb`, `random+fb`.
///
/// Without a suffix FedCLF follows the base config's feedback flag and every
/// baseline samples each round.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyVariant {
    pub label: String,
    pub strategy: Strategy,
    pub feedback: Option<bool>,
}

impl StrategyVariant {
    pub fn parse(token: &str) -> Result<Self> {
        let token = token.trim().to_ascii_lowercase();
        let (name, feedback) = if let Some(n) = token.strip_suffix("+fb") {
            (n, Some(true))
        } else if let Some(n) = token.strip_suffix("-nofb") {
            (n, Some(false))
        } else {
            (token.as_str(), None)
        };
        let strategy: Strategy = name.parse()?;
        Ok(Self {
            label: token.clone(),
            strategy,
            feedback,
        })
    }

    pub fn feedback_for(&self, base: &ExperimentConfig) -> bool {
        self.feedback.unwrap_or(match self.strategy {
            Strategy::FedClf => base.feedback_enabled,
            _ => false,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatterySpec {
    pub base: ExperimentConfig,
    pub strategies: Vec<StrategyVariant>,
    pub datasets: Vec<DatasetVariant>,
    pub seeds: Vec<u64>,
}

impl BatterySpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut base = ExperimentConfig::default();
        let mut strategies = Vec::new();
        let mut datasets = Vec::new();
        let mut seeds = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            let items = || v.split(',').map(str::trim).filter(|s| !s.is_empty());
            match k.trim() {
                "strategies" => strategies = items().map(StrategyVariant::parse).collect::<Result<_>>()?,
                "datasets" => datasets = items().map(DatasetVariant::parse).collect::<Result<_>>()?,
                "seeds" => {
                    seeds = items()
                        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad seed `{s}`"))))
                        .collect::<Result<_>>()?
                }
                key => base.set(key, v)?,
            }
        }
        if strategies.is_empty() || datasets.is_empty() || seeds.is_empty() {
            return Err(Error::Config(
                "battery needs non-empty strategies, datasets and seeds".into(),
            ));
        }
        base.validate()?;
        Ok(Self {
            base,
            strategies,
            datasets,
            seeds,
        })
    }

    pub fn entries(&self) -> Vec<(DatasetVariant, StrategyVariant, u64, ExperimentConfig)> {
        let mut out = Vec::new();
        for d in &self.datasets {
            for s in &self.strategies {
                for &seed in &self.seeds {
                    let cfg = ExperimentConfig {
                        strategy: s.strategy,
                        feedback_enabled: s.feedback_for(&self.base),
                        shard_size: d.shard_size,
                        split_mode: d.split_mode,
                        seed,
                        ..self.base.clone()
                    };
                    out.push((d.clone(), s.clone(), seed, cfg));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryRow {
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub final_ma: f64,
    pub mean_ma_last10: f64,
    pub sampling_occasions: usize,
}

impl BatteryRow {
    pub fn from_history(dataset: &str, strategy: &str, seed: u64, history: &[RoundRecord]) -> Self {
        let tail = &history[history.len().saturating_sub(10)..];
        Self {
            dataset: dataset.to_string(),
            strategy: strategy.to_string(),
            seed,
            final_ma: history.last().map_or(0.0, |h| h.moving_avg_accuracy),
            mean_ma_last10: tail.iter().map(|h| h.moving_avg_accuracy).sum::<f64>() / tail.len().max(1) as f64,
            sampling_occasions: sampling_occasions(history),
        }
    }
}

/// Runs every (dataset, strategy, seed) entry, in parallel across entries.
pub fn run_battery(spec: &BatterySpec, executor: &Executor) -> Result<Vec<BatteryRow>> {
    let entries = spec.entries();
    executor
        .map(&entries, |(d, s, seed, cfg)| {
            let history = run_experiment(cfg, None, Executor::serial())?;
            Ok(BatteryRow::from_history(&d.name, &s.label, *seed, &history))
        })
        .into_iter()
        .collect()
}

pub const BATTERY_HEADER: &str = "dataset,strategy,seed,final_ma,mean_ma_last10,sampling_occasions";
pub const PIVOT_HEADER: &str = "dataset,strategy,seeds,mean_final_ma,mean_ma_last10,mean_sampling_occasions";

pub fn battery_csv(rows: &[BatteryRow]) -> String {
    let mut out = format!("{BATTERY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.dataset, r.strategy, r.seed, r.final_ma, r.mean_ma_last10, r.sampling_occasions
        );
    }
    out
}

/// Seed-averaged table, one line per (dataset, strategy) in first-seen order.
pub fn pivot_csv(rows: &[BatteryRow]) -> String {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&BatteryRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.dataset.clone(), r.strategy.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut out = format!("{PIVOT_HEADER}\n");
    for key in order {
        let (dataset, strategy) = &key;
        let g = &groups[&key];
        let n = g.len() as f64;
        let mean = |f: &dyn Fn(&BatteryRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
        let _ = writeln!(
            out,
            "{dataset},{strategy},{},{},{},{}",
            g.len(),
            mean(&|r| r.final_ma),
            mean(&|r| r.mean_ma_last10),
            mean(&|r| r.sampling_occasions as f64)
        );
    }
    out
}

pub fn cmd_battery(args: &BatteryArgs) -> Result<Vec<BatteryRow>> {
    let spec = BatterySpec::parse(&fs::read_to_string(&args.spec)?)?;
    let rows = run_battery(&spec, &Executor::from_env()?)?;
    write_battery(&args.out, &rows)?;
    Ok(rows)
}

pub fn write_battery(dir: &Path, rows: &[BatteryRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("battery.csv"), battery_csv(rows))?;
    fs::write(dir.join("battery_pivot.csv"), pivot_csv(rows))?;
    Ok(())
}

/// Recomputes the moving-average column from raw accuracies; used by log audits.
pub fn recompute_moving_average(history: &[RoundRecord], window: usize) -> Vec<f64> {
    let accs: Vec<f64> = history.iter().map(|h| h.test_accuracy).collect();
    (1..=accs.len()).map(|r| moving_average(&accs, r, window)).collect()
}
