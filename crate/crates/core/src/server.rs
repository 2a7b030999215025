//! The round loop: feedback-gated selection, client dispatch, weighted
//! averaging, evaluation on the held-out test split, and the run logs.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crate::client::{client_update, ClientUpdateResult};
use crate::dataset::{
    load_dataset, make_synthetic, partition, train_test_split, ClientDataset, LabeledDataset, PartitionSpec, SplitMode,
};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::model::{evaluate, init_params, EvalDetail, ModelParams, ShapeTag, TrainConfig};
use crate::seed::child_seed;
use crate::selection::{
    join_ids, select, selection_log_line, simulated_durations, update_after_round, warmup_rounds, Calibration,
    FactorMode, GlobalTrend, Selection, SelectorConfig, SelectorState, Strategy, SELECTION_LOG_HEADER,
};

/// Fraction of the data held out for server-side evaluation is `1 / TEST_SPLIT`.
pub const TEST_SPLIT: usize = 6;

pub const RUN_LOG_HEADER: &str = "round,accuracy,test_loss,ma_accuracy,selection_ran,selected_ids,elapsed_s";

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub selection_ran: bool,
    pub selected_ids: Vec<usize>,
    pub moving_avg_accuracy: f64,
    /// Simulated seconds since the start of the run; a round lasts as long as its slowest client.
    pub elapsed_s: f64,
}

impl RoundRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.round,
            self.test_accuracy,
            self.test_loss,
            self.moving_avg_accuracy,
            u8::from(self.selection_ran),
            join_ids(&self.selected_ids),
            self.elapsed_s
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// `classes` balanced Gaussian clusters with `per_class` samples each.
    Synthetic {
        classes: usize,
        features: usize,
        per_class: usize,
    },
    File(PathBuf),
}

impl DataSource {
    pub fn desk_default() -> Self {
        DataSource::Synthetic {
            classes: 10,
            features: 8,
            per_class: 720,
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::Synthetic {
                classes,
                features,
                per_class,
            } => write!(f, "{classes}x{features}x{per_class}"),
            DataSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Parses `CxFxN`: `C` classes, `F` features, `N` samples per class.
pub fn parse_synthetic(s: &str) -> Result<DataSource> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("synthetic spec `{s}` is not CxFxN")))?;
    match dims.as_slice() {
        &[classes, features, per_class] if classes > 0 && features > 0 && per_class > 0 => Ok(DataSource::Synthetic {
            classes,
            features,
            per_class,
        }),
        _ => Err(Error::Config(format!("synthetic spec `{s}` is not CxFxN with positive parts"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Softmax,
    Mlp { hidden: usize },
}

impl ModelKind {
    pub fn shape(&self, features: usize, classes: usize) -> Result<ShapeTag> {
        match *self {
            ModelKind::Softmax => ShapeTag::softmax(features, classes),
            ModelKind::Mlp { hidden } => ShapeTag::mlp(features, hidden, classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub num_clients: usize,
    pub select_k: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Mini-batch size; `None` means `min(32, n_k)` per client.
    pub batch_size: Option<usize>,
    pub model: ModelKind,
    pub strategy: Strategy,
    pub factor_mode: FactorMode,
    pub calibration: Calibration,
    pub feedback_enabled: bool,
    pub warmup: bool,
    pub shard_size: usize,
    pub split_mode: SplitMode,
    pub min_fraction: f64,
    pub moving_avg_window: usize,
    pub seed: u64,
    pub data: DataSource,
    pub checkpoint_every: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_clients: 50,
            select_k: 5,
            rounds: 100,
            epochs: 1,
            learning_rate: 0.001,
            batch_size: None,
            model: ModelKind::Softmax,
            strategy: Strategy::FedClf,
            factor_mode: FactorMode::LossRatio,
            calibration: Calibration::Latest,
            feedback_enabled: true,
            warmup: true,
            shard_size: 50,
            split_mode: SplitMode::Equal,
            min_fraction: PartitionSpec::DEFAULT_MIN_FRACTION,
            moving_avg_window: 30,
            seed: 0,
            data: DataSource::desk_default(),
            checkpoint_every: None,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects a boolean, got `{value}`"))),
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{value}`")))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_clients == 0 || self.select_k == 0 || self.select_k > self.num_clients {
            return bad(format!(
                "need 1 <= k <= K (k={}, K={})",
                self.select_k, self.num_clients
            ));
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.moving_avg_window == 0 {
            return bad("moving-average window must be at least 1".into());
        }
        if self.shard_size == 0 {
            return bad("shard size must be at least 1".into());
        }
        if !(self.min_fraction > 0.0 && self.min_fraction <= 1.0) {
            return bad(format!("min_fraction must lie in (0, 1], got {}", self.min_fraction));
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be at least 1".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint interval must be at least 1".into());
        }
        if let ModelKind::Mlp { hidden: 0 } = self.model {
            return bad("hidden width must be at least 1".into());
        }
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: 1,
            rng_seed: 0,
        }
        .validate()
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            shard_size: self.shard_size,
            split_mode: self.split_mode,
            num_clients: self.num_clients,
            min_fraction: self.min_fraction,
            seed: child_seed(self.seed, "partition", 0),
        }
    }

    /// Applies one `key=value` setting. Keys match the long CLI flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "clients" => self.num_clients = parse_num(key, value)?,
            "select-k" => self.select_k = parse_num(key, value)?,
            "rounds" => self.rounds = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "lr" => self.learning_rate = parse_num(key, value)?,
            "batch" => {
                self.batch_size = match value {
                    "auto" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "model" => {
                self.model = match value {
                    "softmax" => ModelKind::Softmax,
                    v => match v.strip_prefix("mlp") {
                        Some("") => ModelKind::Mlp { hidden: 32 },
                        Some(h) => ModelKind::Mlp {
                            hidden: parse_num(key, h.trim_start_matches([':', '-']))?,
                        },
                        None => return Err(Error::Config(format!("unknown model `{v}`"))),
                    },
                }
            }
            "strategy" => self.strategy = value.parse()?,
            "factor-mode" => self.factor_mode = value.parse()?,
            "calibration" => {
                self.calibration = match value {
                    "latest" => Calibration::Latest,
                    "compounding" => Calibration::Compounding,
                    v => return Err(Error::Config(format!("unknown calibration `{v}`"))),
                }
            }
            "feedback" => self.feedback_enabled = parse_bool(key, value)?,
            "no-feedback" => self.feedback_enabled = !parse_bool(key, value)?,
            "warmup" => self.warmup = parse_bool(key, value)?,
            "S" => self.shard_size = parse_num(key, value)?,
            "split" | "mode" => self.split_mode = value.parse()?,
            "min-fraction" => self.min_fraction = parse_num(key, value)?,
            "window" => self.moving_avg_window = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "synthetic" => self.data = parse_synthetic(value)?,
            "data" => self.data = DataSource::File(PathBuf::from(value)),
            "checkpoint-every" => {
                self.checkpoint_every = match value {
                    "0" | "never" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Reads a flat `key=value` file; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Every knob as `key=value` lines, readable by [`ExperimentConfig::apply_file`].
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let model = match self.model {
            ModelKind::Softmax => "softmax".to_string(),
            ModelKind::Mlp { hidden } => format!("mlp:{hidden}"),
        };
        let data = match &self.data {
            DataSource::Synthetic { .. } => format!("synthetic={}", self.data),
            DataSource::File(p) => format!("data={}", p.display()),
        };
        let batch = self.batch_size.map_or("auto".to_string(), |b| b.to_string());
        let calibration = match self.calibration {
            Calibration::Latest => "latest",
            Calibration::Compounding => "compounding",
        };
        let _ = writeln!(out, "clients={}", self.num_clients);
        let _ = writeln!(out, "select-k={}", self.select_k);
        let _ = writeln!(out, "rounds={}", self.rounds);
        let _ = writeln!(out, "epochs={}", self.epochs);
        let _ = writeln!(out, "lr={}", self.learning_rate);
        let _ = writeln!(out, "batch={batch}");
        let _ = writeln!(out, "model={model}");
        let _ = writeln!(out, "strategy={}", self.strategy);
        let _ = writeln!(out, "factor-mode={}", self.factor_mode);
        let _ = writeln!(out, "calibration={calibration}");
        let _ = writeln!(out, "feedback={}", self.feedback_enabled);
        let _ = writeln!(out, "warmup={}", self.warmup);
        let _ = writeln!(out, "S={}", self.shard_size);
        let _ = writeln!(out, "split={}", self.split_mode);
        let _ = writeln!(out, "min-fraction={}", self.min_fraction);
        let _ = writeln!(out, "window={}", self.moving_avg_window);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "{data}");
        let _ = writeln!(out, "checkpoint-every={}", self.checkpoint_every.unwrap_or(0));
        out
    }
}

/// Element-wise `sum_k (n_k / n) * w_k`, accumulated in client-id order.
pub fn aggregate(results: &[ClientUpdateResult]) -> Result<ModelParams> {
    let first = results.first().ok_or(Error::Empty("client results"))?;
    let mut ordered: Vec<&ClientUpdateResult> = results.iter().collect();
    ordered.sort_by_key(|r| r.client_id);
    for r in &ordered {
        first.new_params.ensure_same_shape(&r.new_params)?;
    }
    let total: usize = ordered.iter().map(|r| r.n_k).sum();
    if total == 0 {
        return Err(Error::Config("aggregation over zero samples".into()));
    }
    let mut out = ModelParams::zeros(first.new_params.shape());
    for r in ordered {
        let weight = r.n_k as f64 / total as f64;
        for (acc, v) in out.values_mut().iter_mut().zip(r.new_params.values()) {
            *acc += weight * v;
        }
    }
    Ok(out)
}

/// Whether round `r` should draw a new cohort.
///
/// Always true for the first two rounds, during warm-up, and when feedback is
/// off. Otherwise true only if accuracy strictly fell between `r-2` and `r-1`.
pub fn feedback_gate(history: &[RoundRecord], r: usize, feedback_enabled: bool, warmup_len: usize) -> bool {
    if !feedback_enabled || r <= 2 || r <= warmup_len || history.len() < r - 1 {
        return true;
    }
    history[r - 2].test_accuracy < history[r - 3].test_accuracy
}

/// Mean of the last `min(window, r)` accuracies up to round `r` (1-based).
pub fn moving_average(acc_history: &[f64], r: usize, window: usize) -> f64 {
    let r = r.min(acc_history.len());
    if r == 0 || window == 0 {
        return 0.0;
    }
    let span = window.min(r);
    acc_history[r - span..r].iter().sum::<f64>() / span as f64
}

/// Trend entering round `r`; missing earlier rounds repeat the latest one.
pub fn trend_before(history: &[RoundRecord]) -> GlobalTrend {
    match history {
        [] => GlobalTrend::neutral(),
        [only] => GlobalTrend {
            acc_prev: only.test_accuracy,
            acc_prev2: only.test_accuracy,
            loss_prev: only.test_loss,
            loss_prev2: only.test_loss,
        },
        [.., prev2, prev] => GlobalTrend {
            acc_prev: prev.test_accuracy,
            acc_prev2: prev2.test_accuracy,
            loss_prev: prev.test_loss,
            loss_prev2: prev2.test_loss,
        },
    }
}

/// Loads or synthesises the data and splits off the test set.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let full = match &cfg.data {
        DataSource::Synthetic {
            classes,
            features,
            per_class,
        } => make_synthetic(classes * per_class, *features, *classes, child_seed(cfg.seed, "data", 0)),
        DataSource::File(path) => load_dataset(path)?,
    };
    train_test_split(&full, TEST_SPLIT, child_seed(cfg.seed, "test-split", 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub record: RoundRecord,
    /// Present when the gate opened and the selector ran.
    pub selection: Option<Selection>,
}

#[derive(Debug)]
pub struct Experiment {
    cfg: ExperimentConfig,
    clients: Vec<ClientDataset>,
    test: LabeledDataset,
    global: ModelParams,
    selector: SelectorState,
    durations: Vec<f64>,
    history: Vec<RoundRecord>,
    cohort: Vec<usize>,
    executor: Executor,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, train: &LabeledDataset, test: LabeledDataset, executor: Executor) -> Result<Self> {
        cfg.validate()?;
        let clients = partition(train, &cfg.partition_spec())?;
        let shape = cfg.model.shape(train.num_features(), train.num_classes())?;
        let global = init_params(shape, child_seed(cfg.seed, "init", 0));
        let durations = simulated_durations(cfg.num_clients, child_seed(cfg.seed, "durations", 0));
        let counts: Vec<usize> = clients.iter().map(ClientDataset::n_k).collect();
        let selector_cfg = SelectorConfig {
            factor_mode: cfg.factor_mode,
            calibration: cfg.calibration,
            warmup: cfg.warmup,
            ..SelectorConfig::new(cfg.strategy, child_seed(cfg.seed, "selector", 0))
        };
        let selector = SelectorState::new(selector_cfg, &counts, durations.clone())?;
        Ok(Self {
            cfg,
            clients,
            test,
            global,
            selector,
            durations,
            history: Vec::new(),
            cohort: Vec::new(),
            executor,
        })
    }

    pub fn from_config(cfg: ExperimentConfig, executor: Executor) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = prepare_data(&cfg)?;
        Self::new(cfg, &train, test, executor)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    pub fn selector(&self) -> &SelectorState {
        &self.selector
    }

    fn warmup_len(&self) -> usize {
        if self.cfg.warmup {
            warmup_rounds(self.cfg.num_clients, self.cfg.select_k)
        } else {
            0
        }
    }

    fn train_config(&self, r: usize, client: &ClientDataset) -> TrainConfig {
        TrainConfig {
            epochs: self.cfg.epochs,
            learning_rate: self.cfg.learning_rate,
            batch_size: self.cfg.batch_size.unwrap_or_else(|| client.n_k().min(32)),
            rng_seed: child_seed(self.cfg.seed, "client-train", ((r as u64) << 32) | client.client_id as u64),
        }
    }

    /// Runs the next round. Any client failure aborts the round before aggregation.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let r = self.history.len() + 1;
        let resample = feedback_gate(&self.history, r, self.cfg.feedback_enabled, self.warmup_len());
        let selection = if resample || self.cohort.is_empty() {
            let trend = trend_before(&self.history);
            let sel = select(&mut self.selector, r, self.cfg.select_k, &trend)?;
            self.cohort = sel.ids.clone();
            Some(sel)
        } else {
            None
        };

        let want_grad_norms = self.cfg.strategy == crate::selection::Strategy::GradNorm;
        let jobs: Vec<(&ClientDataset, TrainConfig)> = self
            .cohort
            .iter()
            .map(|&id| (&self.clients[id], self.train_config(r, &self.clients[id])))
            .collect();
        let global = &self.global;
        let results: Vec<ClientUpdateResult> = self
            .executor
            .map(&jobs, |(client, tc)| client_update(client, global, tc, want_grad_norms))
            .into_iter()
            .collect::<Result<_>>()?;
        for res in &results {
            log::debug!(
                "round {r} client {}: loss {:.4} -> {:.4}",
                res.client_id,
                res.mean_loss,
                res.post_train_loss
            );
        }

        let aggregated = aggregate(&results)?;
        let eval = evaluate(&aggregated, &self.test, EvalDetail::Summary)?;
        update_after_round(&mut self.selector, &results, r)?;
        self.global = aggregated;

        let round_time = self
            .cohort
            .iter()
            .map(|&id| self.durations[id])
            .fold(0.0, f64::max);
        let elapsed_s = self.history.last().map_or(0.0, |h| h.elapsed_s) + round_time;
        let mut accs: Vec<f64> = self.history.iter().map(|h| h.test_accuracy).collect();
        accs.push(eval.accuracy);
        let record = RoundRecord {
            round: r,
            test_accuracy: eval.accuracy,
            test_loss: eval.mean_loss,
            selection_ran: selection.is_some(),
            selected_ids: self.cohort.clone(),
            moving_avg_accuracy: moving_average(&accs, r, self.cfg.moving_avg_window),
            elapsed_s,
        };
        self.history.push(record.clone());
        Ok(RoundOutcome { record, selection })
    }

    /// Runs all remaining rounds, streaming each one to `sink`.
    pub fn run(&mut self, sink: &mut dyn RoundSink) -> Result<Vec<RoundRecord>> {
        while self.history.len() < self.cfg.rounds {
            let outcome = self.run_round()?;
            sink.on_round(&self.cfg, &outcome, &self.global)?;
        }
        Ok(self.history.clone())
    }
}

pub trait RoundSink {
    fn on_round(&mut self, cfg: &ExperimentConfig, outcome: &RoundOutcome, global: &ModelParams) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl RoundSink for NullSink {
    fn on_round(&mut self, _: &ExperimentConfig, _: &RoundOutcome, _: &ModelParams) -> Result<()> {
        Ok(())
    }
}

/// Writes `run_log.csv`, `selection_log.csv` and checkpoints into a directory,
/// flushing after every round.
pub struct DirSink {
    dir: PathBuf,
    run_log: BufWriter<File>,
    selection_log: BufWriter<File>,
}

impl DirSink {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut run_log = BufWriter::new(File::create(dir.join("run_log.csv"))?);
        writeln!(run_log, "{RUN_LOG_HEADER}")?;
        let mut selection_log = BufWriter::new(File::create(dir.join("selection_log.csv"))?);
        writeln!(selection_log, "{SELECTION_LOG_HEADER}")?;
        run_log.flush()?;
        selection_log.flush()?;
        Ok(Self {
            dir,
            run_log,
            selection_log,
        })
    }
}

impl RoundSink for DirSink {
    fn on_round(&mut self, cfg: &ExperimentConfig, outcome: &RoundOutcome, global: &ModelParams) -> Result<()> {
        let rec = &outcome.record;
        writeln!(self.run_log, "{}", rec.csv_row())?;
        let factor = outcome.selection.as_ref().and_then(|s| s.factor);
        writeln!(
            self.selection_log,
            "{}",
            selection_log_line(
                rec.round,
                cfg.strategy,
                rec.selection_ran,
                &rec.selected_ids,
                cfg.factor_mode,
                factor
            )
        )?;
        self.run_log.flush()?;
        self.selection_log.flush()?;
        if let Some(every) = cfg.checkpoint_every {
            if rec.round.is_multiple_of(every) {
                global.save(self.dir.join(format!("checkpoint_r{:04}.fedw", rec.round)))?;
            }
        }
        Ok(())
    }
}

pub fn sampling_occasions(history: &[RoundRecord]) -> usize {
    history.iter().filter(|h| h.selection_ran).count()
}

/// `summary.txt`: a timestamp comment line, the outcome, then the config echo.
pub fn summary_text(cfg: &ExperimentConfig, history: &[RoundRecord], wall_seconds: f64) -> String {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut out = format!("# written_unix={started} wall_s={wall_seconds:.3}\n");
    let final_ma = history.last().map_or(0.0, |h| h.moving_avg_accuracy);
    let _ = writeln!(out, "final_ma={final_ma}");
    let _ = writeln!(out, "sampling_occasions={}", sampling_occasions(history));
    let _ = writeln!(out, "rounds_completed={}", history.len());
    out.push_str(&cfg.to_kv());
    out
}

/// Runs a whole experiment. With `out`, logs and the summary go to that directory.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>, executor: Executor) -> Result<Vec<RoundRecord>> {
    cfg.validate()?;
    let started = Instant::now();
    let mut experiment = Experiment::from_config(cfg.clone(), executor)?;
    let Some(dir) = out else {
        return experiment.run(&mut NullSink);
    };
    let mut sink = DirSink::create(dir)?;
    let result = experiment.run(&mut sink);
    let summary = summary_text(cfg, experiment.history(), started.elapsed().as_secs_f64());
    fs::write(dir.join("summary.txt"), summary)?;
    result
}
