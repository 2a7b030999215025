//! Participant selection.
//!
//! The first `ceil(K/k)` rounds draw disjoint cohorts so that every client
//! trains once and reports a loss utility. After that the selector ranks
//! clients by a strategy-specific utility and keeps the top `k`.
//!
//! For [`Strategy::FedClf`] a client that trained in the previous cohort keeps
//! its stored utility as-is; every other client's utility was measured
//! against an older global model and is rescaled by the global trend: the
//! ratio of the last two global test losses ([`FactorMode::LossRatio`]) or
//! accuracies ([`FactorMode::AccRatio`]).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand_distr::{Distribution, LogNormal};

use crate::client::ClientUpdateResult;
use crate::error::{Error, Result};
use crate::seed::child_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Calibrated loss utility.
    FedClf,
    /// Stored loss utility, never rescaled.
    RawLoss,
    /// Uniform random cohort (FedAvg).
    Random,
    /// Loss utility times a training-time penalty.
    OortLike,
    /// Last weight change times sample count.
    NewtLike,
    /// Stored per-sample gradient-norm utility.
    GradNorm,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FedClf,
        Strategy::RawLoss,
        Strategy::Random,
        Strategy::OortLike,
        Strategy::NewtLike,
        Strategy::GradNorm,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::FedClf => "fedclf",
            Strategy::RawLoss => "rawloss",
            Strategy::Random => "random",
            Strategy::OortLike => "oort",
            Strategy::NewtLike => "newt",
            Strategy::GradNorm => "gradnorm",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedclf" => Ok(Strategy::FedClf),
            "rawloss" | "loss" => Ok(Strategy::RawLoss),
            "random" | "fedavg" => Ok(Strategy::Random),
            "oort" => Ok(Strategy::OortLike),
            "newt" => Ok(Strategy::NewtLike),
            "gradnorm" => Ok(Strategy::GradNorm),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorMode {
    LossRatio,
    AccRatio,
}

impl fmt::Display for FactorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FactorMode::LossRatio => "loss",
            FactorMode::AccRatio => "acc",
        })
    }
}

impl FromStr for FactorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "loss" => Ok(FactorMode::LossRatio),
            "acc" => Ok(FactorMode::AccRatio),
            other => Err(Error::Config(format!("unknown factor mode `{other}`"))),
        }
    }
}

/// How stale utilities are corrected when a client sits out several selections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Calibration {
    /// Stored utility times the latest one-round factor.
    Latest,
    /// Stored utility times the product of every factor applied since the client last trained.
    Compounding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    pub client_id: usize,
    pub last_loss_utility: Option<f64>,
    pub last_trained_round: Option<usize>,
    pub n_k: usize,
    pub last_weight_delta_norm: Option<f64>,
    pub last_round_duration: Option<f64>,
    pub last_grad_norm_utility: Option<f64>,
    /// Product of correction factors applied since the last training round.
    pub stale_factor: f64,
}

impl ClientRecord {
    pub fn new(client_id: usize, n_k: usize) -> Self {
        Self {
            client_id,
            last_loss_utility: None,
            last_trained_round: None,
            n_k,
            last_weight_delta_norm: None,
            last_round_duration: None,
            last_grad_norm_utility: None,
            stale_factor: 1.0,
        }
    }

    pub fn trained(&self) -> bool {
        self.last_trained_round.is_some()
    }
}

/// Global test accuracy and loss of the two most recent rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTrend {
    pub acc_prev: f64,
    pub acc_prev2: f64,
    pub loss_prev: f64,
    pub loss_prev2: f64,
}

impl GlobalTrend {
    /// A trend whose correction factor is exactly 1 in both modes.
    pub fn neutral() -> Self {
        Self {
            acc_prev: 1.0,
            acc_prev2: 1.0,
            loss_prev: 1.0,
            loss_prev2: 1.0,
        }
    }

    /// The correction factor, or `None` when the ratio is undefined.
    pub fn factor(&self, mode: FactorMode) -> Option<f64> {
        let (num, den) = match mode {
            FactorMode::LossRatio => (self.loss_prev, self.loss_prev2),
            FactorMode::AccRatio => (self.acc_prev, self.acc_prev2),
        };
        let f = num / den;
        (den > 0.0 && num.is_finite() && den.is_finite() && f.is_finite()).then_some(f)
    }

    fn factor_or_unit(&self, mode: FactorMode) -> f64 {
        self.factor(mode).unwrap_or_else(|| {
            log::warn!("correction factor undefined for {self:?} in {mode} mode; using raw utility");
            1.0
        })
    }
}

/// Stored loss utility rescaled by the one-round global trend.
///
/// Callers pass only clients outside the previous cohort; those inside keep
/// their raw value. An undefined factor leaves the utility unchanged.
pub fn calibrate(record: &ClientRecord, trend: &GlobalTrend, mode: FactorMode) -> Result<f64> {
    let utility = record.last_loss_utility.ok_or_else(|| {
        Error::Internal(format!("client {} has no stored utility", record.client_id))
    })?;
    Ok(utility * trend.factor_or_unit(mode))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorConfig {
    pub strategy: Strategy,
    pub factor_mode: FactorMode,
    pub calibration: Calibration,
    /// Run the unique-sampling phase before ranking.
    pub warmup: bool,
    /// Exponent of the training-time penalty (Oort-like only).
    pub oort_alpha: f64,
    pub seed: u64,
}

impl SelectorConfig {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            factor_mode: FactorMode::LossRatio,
            calibration: Calibration::Latest,
            warmup: true,
            oort_alpha: 2.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorState {
    pub config: SelectorConfig,
    pub records: BTreeMap<usize, ClientRecord>,
    pub sampled_once: BTreeSet<usize>,
    pub last_round_selected: BTreeSet<usize>,
    /// Simulated seconds each client needs for a round.
    pub durations: Vec<f64>,
    /// Median of `durations`; the Oort-like penalty starts above it.
    pub preferred_duration: f64,
}

impl SelectorState {
    /// `sample_counts[i]` and `durations[i]` belong to client `i`.
    pub fn new(config: SelectorConfig, sample_counts: &[usize], durations: Vec<f64>) -> Result<Self> {
        if sample_counts.is_empty() {
            return Err(Error::Empty("client list"));
        }
        if durations.len() != sample_counts.len() {
            return Err(Error::Dimension {
                expected: sample_counts.len(),
                found: durations.len(),
            });
        }
        let records = sample_counts
            .iter()
            .enumerate()
            .map(|(id, &n)| (id, ClientRecord::new(id, n)))
            .collect();
        Ok(Self {
            config,
            records,
            sampled_once: BTreeSet::new(),
            last_round_selected: BTreeSet::new(),
            preferred_duration: median(&durations),
            durations,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.records.len()
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Per-client round times drawn from `LogNormal(ln 10, 0.5)` seconds.
pub fn simulated_durations(num_clients: usize, seed: u64) -> Vec<f64> {
    let mut rng = child_rng(seed, "client-durations", 0);
    let dist = LogNormal::new(10f64.ln(), 0.5).expect("valid lognormal");
    (0..num_clients).map(|_| dist.sample(&mut rng)).collect()
}

/// Length of the unique-sampling phase.
pub fn warmup_rounds(num_clients: usize, k: usize) -> usize {
    num_clients.div_ceil(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Ranked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Chosen client ids, ascending.
    pub ids: Vec<usize>,
    pub phase: Phase,
    /// Correction factor applied to stale clients (FedCLF ranked rounds only).
    pub factor: Option<f64>,
}

/// Ranking score. Never-trained clients (`fresh`) sort ahead of trained ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub fresh: bool,
    pub value: f64,
}

fn by_score(a: &(usize, Score), b: &(usize, Score)) -> Ordering {
    b.1.fresh
        .cmp(&a.1.fresh)
        .then_with(|| b.1.value.total_cmp(&a.1.value))
        .then_with(|| a.0.cmp(&b.0))
}

/// Every client's utility under the configured strategy, best first.
///
/// Ties break on the lower client id. Pure: compounding factors are not
/// committed here.
pub fn rank(state: &SelectorState, trend: &GlobalTrend) -> Result<Vec<(usize, Score)>> {
    let cfg = &state.config;
    let factor = trend.factor(cfg.factor_mode);
    let mut scored = Vec::with_capacity(state.records.len());
    for (&id, rec) in &state.records {
        if !rec.trained() {
            if cfg.warmup {
                return Err(Error::Internal(format!(
                    "client {id} reached ranking without a stored utility"
                )));
            }
            let value = match cfg.strategy {
                Strategy::NewtLike => rec.n_k as f64,
                _ => f64::INFINITY,
            };
            scored.push((id, Score { fresh: true, value }));
            continue;
        }
        let missing = |what: &str| Error::Internal(format!("client {id} has no stored {what}"));
        let raw = rec.last_loss_utility.ok_or_else(|| missing("loss utility"))?;
        let value = match cfg.strategy {
            Strategy::FedClf if state.last_round_selected.contains(&id) => raw,
            Strategy::FedClf => match cfg.calibration {
                Calibration::Latest => calibrate(rec, trend, cfg.factor_mode)?,
                Calibration::Compounding => raw * rec.stale_factor * factor.unwrap_or(1.0),
            },
            Strategy::RawLoss => raw,
            Strategy::Random => 0.0,
            Strategy::GradNorm => rec
                .last_grad_norm_utility
                .ok_or_else(|| missing("gradient-norm utility"))?,
            Strategy::OortLike => {
                let d = rec
                    .last_round_duration
                    .ok_or_else(|| missing("round duration"))?;
                let t = state.preferred_duration;
                let system = if d > t { (t / d).powf(cfg.oort_alpha) } else { 1.0 };
                raw * system
            }
            Strategy::NewtLike => {
                rec.last_weight_delta_norm
                    .ok_or_else(|| missing("weight change"))?
                    * rec.n_k as f64
            }
        };
        scored.push((id, Score { fresh: false, value }));
    }
    scored.sort_by(by_score);
    Ok(scored)
}

/// Chooses the cohort for round `r` (1-based) and records it as the last cohort.
pub fn select(state: &mut SelectorState, r: usize, k: usize, trend: &GlobalTrend) -> Result<Selection> {
    let total = state.num_clients();
    if k == 0 || k > total {
        return Err(Error::Config(format!("need 1 <= k <= K, got k={k}, K={total}")));
    }
    let mut rng = child_rng(state.config.seed, "select", r as u64);

    let selection = if state.config.warmup && r <= warmup_rounds(total, k) {
        let available: Vec<usize> = state
            .records
            .keys()
            .copied()
            .filter(|id| !state.sampled_once.contains(id))
            .collect();
        let mut ids: Vec<usize> = if available.len() >= k {
            index::sample(&mut rng, available.len(), k)
                .into_iter()
                .map(|i| available[i])
                .collect()
        } else {
            let pool: Vec<usize> = state
                .records
                .keys()
                .copied()
                .filter(|id| state.sampled_once.contains(id))
                .collect();
            let pad = k - available.len();
            let mut ids = available;
            ids.extend(index::sample(&mut rng, pool.len(), pad).into_iter().map(|i| pool[i]));
            ids
        };
        ids.sort_unstable();
        Selection {
            ids,
            phase: Phase::Warmup,
            factor: None,
        }
    } else if state.config.strategy == Strategy::Random {
        let keys: Vec<usize> = state.records.keys().copied().collect();
        let mut ids: Vec<usize> = index::sample(&mut rng, keys.len(), k)
            .into_iter()
            .map(|i| keys[i])
            .collect();
        ids.sort_unstable();
        Selection {
            ids,
            phase: Phase::Ranked,
            factor: None,
        }
    } else {
        let ranking = rank(state, trend)?;
        let mut ids: Vec<usize> = ranking.iter().take(k).map(|(id, _)| *id).collect();
        ids.sort_unstable();
        let factor = (state.config.strategy == Strategy::FedClf)
            .then(|| trend.factor(state.config.factor_mode).unwrap_or(1.0));
        if state.config.calibration == Calibration::Compounding {
            if let Some(f) = factor {
                for (id, rec) in state.records.iter_mut() {
                    if rec.trained() && !state.last_round_selected.contains(id) {
                        rec.stale_factor *= f;
                    }
                }
            }
        }
        Selection {
            ids,
            phase: Phase::Ranked,
            factor,
        }
    };

    state.sampled_once.extend(selection.ids.iter().copied());
    state.last_round_selected = selection.ids.iter().copied().collect();
    Ok(selection)
}

/// Stores the cohort's fresh statistics. Clients outside `results` keep stale values.
pub fn update_after_round(state: &mut SelectorState, results: &[ClientUpdateResult], r: usize) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Empty("round results"));
    }
    if let Some(stray) = results
        .iter()
        .find(|res| !state.last_round_selected.contains(&res.client_id))
    {
        return Err(Error::Internal(format!(
            "result from client {} which was not selected",
            stray.client_id
        )));
    }
    for res in results {
        let duration = state.durations[res.client_id];
        let rec = state
            .records
            .get_mut(&res.client_id)
            .expect("selected ids are record keys");
        rec.last_loss_utility = Some(res.loss_utility);
        rec.last_trained_round = Some(r);
        rec.n_k = res.n_k;
        rec.last_weight_delta_norm = Some(res.weight_delta_norm);
        rec.last_round_duration = Some(duration);
        rec.last_grad_norm_utility = res.grad_norm_utility;
        rec.stale_factor = 1.0;
    }
    Ok(())
}

/// `round,strategy,sampled_flag,selected_ids,factor_mode,factor_value`
pub const SELECTION_LOG_HEADER: &str = "round,strategy,sampled_flag,selected_ids,factor_mode,factor_value";

pub fn selection_log_line(
    round: usize,
    strategy: Strategy,
    sampled: bool,
    ids: &[usize],
    factor_mode: FactorMode,
    factor: Option<f64>,
) -> String {
    format!(
        "{round},{strategy},{},{},{factor_mode},{}",
        u8::from(sampled),
        join_ids(ids),
        factor.map(|f| f.to_string()).unwrap_or_default()
    )
}

pub fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}
