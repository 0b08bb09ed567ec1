//! Grid baselines and budgeted HPO runs over a discrete-event clock.
//!
//! Every worker slot runs one trial at a time. Time advances by the cost each
//! evaluator report declares, and events from different slots are processed in
//! time order (ties go to the lower slot), so sampler and scheduler calls see a
//! single, reproducible ordering.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::{
    random_sample, tpe_suggest, ObservationHistory, ObservationStatus, SamplerError, TpeParams,
};
use crate::scheduler::{AshaConfig, Decision, RungLedger, SchedulerError, TrialId};
use crate::space::{contains, GridSpec, SearchSpace, SpaceError, TrialConfig};
use crate::verdict::RunScores;

pub const DEFAULT_TRAINING_SEED: u64 = 42;
pub const DEFAULT_REP_SEEDS: [u64; 3] = [1, 2, 3];
pub const DEFAULT_REDUCTION_FACTOR: u32 = 4;
pub const DEFAULT_GRACE_PERIOD: u32 = 1;
const MAX_CONSECUTIVE_FAILURES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no active trial on slot {0}")]
    NoActiveTrial(usize),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no message from evaluator within {0} s")]
    Timeout(u64),
    #[error("evaluator exited before sending final")]
    Exited,
    #[error("evaluator reported error: {0}")]
    Reported(String),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("no trial produced a report before the deadline")]
    EmptyRun,
    #[error("grid baseline incomplete: config #{index} failed: {source}")]
    BaselineIncomplete { index: usize, source: EvalError },
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("evaluator failed to start trial {trial}: {source}")]
    Start { trial: TrialId, source: EvalError },
    #[error("{0} consecutive trials failed; last error: {1}")]
    TooManyFailures(usize, EvalError),
    #[error("suggested config for trial {0} falls outside the search space")]
    ConfigOutsideSpace(TrialId),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "RS")]
    RandomSearch,
    #[serde(rename = "ASHA")]
    Asha,
    #[serde(rename = "BO+ASHA")]
    BoAsha,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::RandomSearch, Algorithm::Asha, Algorithm::BoAsha];

    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::RandomSearch => "RS",
            Algorithm::Asha => "ASHA",
            Algorithm::BoAsha => "BO+ASHA",
        }
    }

    pub fn prunes(self) -> bool {
        !matches!(self, Algorithm::RandomSearch)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown algorithm `{0}` (expected RS, ASHA or BO+ASHA)")]
pub struct UnknownAlgorithm(pub String);

impl FromStr for Algorithm {
    type Err = UnknownAlgorithm;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "RS" => Ok(Algorithm::RandomSearch),
            "ASHA" => Ok(Algorithm::Asha),
            "BO+ASHA" => Ok(Algorithm::BoAsha),
            other => Err(UnknownAlgorithm(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSize {
    Small,
    Large,
}

impl TaskSize {
    pub fn checkpoints_per_epoch(self) -> u32 {
        match self {
            TaskSize::Small => 5,
            TaskSize::Large => 10,
        }
    }
}

/// Checkpoint steps `1..=epochs * per_epoch`.
pub fn checkpoint_plan(epochs: u32, size: TaskSize) -> Vec<u32> {
    (1..=epochs * size.checkpoints_per_epoch()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialPlan {
    pub epochs: u32,
    pub checkpoints_per_epoch: u32,
}

impl TrialPlan {
    pub fn new(epochs: u32, size: TaskSize) -> Self {
        Self {
            epochs,
            checkpoints_per_epoch: size.checkpoints_per_epoch(),
        }
    }

    pub fn total_checkpoints(&self) -> u32 {
        self.epochs * self.checkpoints_per_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStart {
    pub trial_id: TrialId,
    pub config: TrialConfig,
    pub plan: TrialPlan,
    pub training_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub step: u32,
    pub val_metric: f64,
    pub val_loss: f64,
    pub cost_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub best_step: Option<u32>,
    pub test_metric_at_best: Option<f64>,
}

/// Something that trains one configuration per slot and reports checkpoints.
pub trait Evaluator {
    fn task_size(&self) -> TaskSize;

    fn start(&mut self, slot: usize, start: &TrialStart) -> Result<(), EvalError>;

    /// The next checkpoint report, or `None` once the trial has no more to give.
    fn next_report(&mut self, slot: usize) -> Result<Option<Report>, EvalError>;

    fn stop(&mut self, slot: usize) -> Result<(), EvalError>;

    /// Ends the trial; `best_step` is the checkpoint the engine selected.
    fn finish(&mut self, slot: usize, best_step: Option<u32>) -> Result<FinalReport, EvalError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub step: u32,
    pub val_metric: f64,
    pub val_loss: f64,
}

impl CheckpointReport {
    /// Ordering used for best-checkpoint selection; `Greater` means better.
    fn rank(&self, other: &CheckpointReport) -> std::cmp::Ordering {
        self.val_metric
            .total_cmp(&other.val_metric)
            .then(other.val_loss.total_cmp(&self.val_loss))
            .then(other.step.cmp(&self.step))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Running,
    Completed,
    Pruned,
    Truncated,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: TrialId,
    pub config: TrialConfig,
    pub reports: Vec<CheckpointReport>,
    pub best_checkpoint: Option<CheckpointReport>,
    pub test_metric_at_best: Option<f64>,
    pub status: TrialStatus,
    pub cost_seconds: f64,
    pub slot: usize,
    pub started_at: f64,
    pub finished_at: Option<f64>,
}

impl TrialRecord {
    pub(crate) fn new(trial_id: TrialId, config: TrialConfig, slot: usize, started_at: f64) -> Self {
        Self {
            trial_id,
            config,
            reports: Vec::new(),
            best_checkpoint: None,
            test_metric_at_best: None,
            status: TrialStatus::Running,
            cost_seconds: 0.0,
            slot,
            started_at,
            finished_at: None,
        }
    }

    pub(crate) fn push(&mut self, report: &Report) {
        let cp = CheckpointReport {
            step: report.step,
            val_metric: report.val_metric,
            val_loss: report.val_loss,
        };
        self.cost_seconds += report.cost_seconds;
        if self
            .best_checkpoint
            .as_ref()
            .is_none_or(|b| cp.rank(b).is_gt())
        {
            self.best_checkpoint = Some(cp);
        }
        self.reports.push(cp);
    }

    pub fn last_val_metric(&self) -> Option<f64> {
        self.reports.last().map(|r| r.val_metric)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub gst_multiplier: f64,
    pub gst_seconds: f64,
}

impl BudgetSpec {
    pub fn new(gst_multiplier: f64, gst_seconds: f64) -> Result<Self, EngineError> {
        let b = Self {
            gst_multiplier,
            gst_seconds,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.gst_multiplier > 0.0 && self.gst_multiplier.is_finite()) {
            return Err(EngineError::InvalidBudget(format!(
                "multiplier must be positive, got {}",
                self.gst_multiplier
            )));
        }
        if !(self.gst_seconds > 0.0 && self.gst_seconds.is_finite()) {
            return Err(EngineError::InvalidBudget(format!(
                "1GST must be positive, got {} s",
                self.gst_seconds
            )));
        }
        Ok(())
    }

    pub fn deadline(&self) -> f64 {
        self.gst_multiplier * self.gst_seconds
    }
}

/// The globally best `(trial_id, checkpoint)`: highest validation metric, then
/// lowest loss, earliest step, lowest trial id.
pub fn select_best(trials: &[TrialRecord]) -> Result<(TrialId, CheckpointReport), EngineError> {
    let mut best: Option<(TrialId, CheckpointReport)> = None;
    for t in trials {
        for r in &t.reports {
            let better = match &best {
                None => true,
                Some((id, b)) => match r.rank(b) {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Equal => t.trial_id < *id,
                    std::cmp::Ordering::Less => false,
                },
            };
            if better {
                best = Some((t.trial_id, *r));
            }
        }
    }
    best.ok_or(EngineError::EmptyRun)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBaseline {
    pub trials: Vec<TrialRecord>,
    pub best_trial: TrialId,
    pub best_step: u32,
    /// Serial sum of grid trial costs; this is 1GST.
    pub runtime_seconds: f64,
    pub scores: RunScores,
}

fn run_to_end(
    evaluator: &mut dyn Evaluator,
    slot: usize,
    record: &mut TrialRecord,
    clock: &mut f64,
) -> Result<(), EvalError> {
    while let Some(report) = evaluator.next_report(slot)? {
        *clock += report.cost_seconds;
        record.push(&report);
    }
    Ok(())
}

/// Runs every grid combination serially to its full epoch count.
pub fn run_grid_search(
    evaluator: &mut dyn Evaluator,
    grid: &GridSpec,
    training_seed: u64,
) -> Result<GridBaseline, EngineError> {
    let plan = TrialPlan::new(grid.epochs(), evaluator.task_size());
    let mut clock = 0.0;
    let mut trials = Vec::new();
    for (index, config) in grid.combinations().into_iter().enumerate() {
        let trial_id = index as TrialId;
        let start = TrialStart {
            trial_id,
            config: config.clone(),
            plan,
            training_seed,
        };
        let mut record = TrialRecord::new(trial_id, config, 0, clock);
        let result = evaluator
            .start(0, &start)
            .and_then(|_| run_to_end(evaluator, 0, &mut record, &mut clock))
            .and_then(|_| evaluator.finish(0, record.best_checkpoint.map(|b| b.step)));
        let fin = result.map_err(|source| EngineError::BaselineIncomplete { index, source })?;
        if record.reports.is_empty() {
            return Err(EngineError::BaselineIncomplete {
                index,
                source: EvalError::Protocol("trial produced no reports".into()),
            });
        }
        record.test_metric_at_best = fin.test_metric_at_best;
        record.status = TrialStatus::Completed;
        record.finished_at = Some(clock);
        trials.push(record);
    }
    let (best_trial, best) = select_best(&trials)?;
    let test = trials[best_trial as usize]
        .test_metric_at_best
        .ok_or(EngineError::BaselineIncomplete {
            index: best_trial as usize,
            source: EvalError::Protocol("grid best trial has no test metric".into()),
        })?;
    Ok(GridBaseline {
        runtime_seconds: trials.iter().map(|t| t.cost_seconds).sum(),
        trials,
        best_trial,
        best_step: best.step,
        scores: RunScores {
            val_metric: best.val_metric,
            val_loss: best.val_loss,
            test_metric: test,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpoOptions {
    pub epochs: u32,
    #[serde(default = "default_slots")]
    pub slots: usize,
    #[serde(default)]
    pub asha: Option<AshaConfig>,
    #[serde(default)]
    pub tpe: TpeParams,
    #[serde(default = "default_training_seed")]
    pub training_seed: u64,
}

fn default_slots() -> usize {
    1
}

fn default_training_seed() -> u64 {
    DEFAULT_TRAINING_SEED
}

impl HpoOptions {
    pub fn new(epochs: u32) -> Self {
        Self {
            epochs,
            slots: 1,
            asha: None,
            tpe: TpeParams::default(),
            training_seed: DEFAULT_TRAINING_SEED,
        }
    }

    pub fn asha_for(&self, plan: &TrialPlan) -> Result<AshaConfig, EngineError> {
        let cfg = self.asha.unwrap_or(AshaConfig {
            grace_period: DEFAULT_GRACE_PERIOD,
            reduction_factor: DEFAULT_REDUCTION_FACTOR,
            max_t: plan.total_checkpoints(),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpoRunScores {
    pub algorithm: Algorithm,
    pub best_trial: TrialId,
    pub best_step: u32,
    pub val_metric: f64,
    pub val_loss: f64,
    pub test_metric: Option<f64>,
    pub trials_started: usize,
    pub trials_completed: usize,
    /// Simulated time at which the last trial finished.
    pub elapsed_seconds: f64,
    pub deadline_seconds: f64,
}

impl HpoRunScores {
    pub fn run_scores(&self) -> Option<RunScores> {
        Some(RunScores {
            val_metric: self.val_metric,
            val_loss: self.val_loss,
            test_metric: self.test_metric?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpoRun {
    pub scores: HpoRunScores,
    pub trials: Vec<TrialRecord>,
}

struct Active {
    index: usize,
    pending: Option<Report>,
    /// Time at which `pending` lands.
    due: f64,
}

enum SlotState {
    Idle,
    Busy(Active),
    Retired,
}

struct Run<'a> {
    algorithm: Algorithm,
    space: &'a SearchSpace,
    opts: &'a HpoOptions,
    plan: TrialPlan,
    asha: Option<AshaConfig>,
    ledger: RungLedger,
    history: ObservationHistory,
    rng: ChaCha8Rng,
    trials: Vec<TrialRecord>,
    consecutive_failures: usize,
}

impl Run<'_> {
    fn suggest(&mut self) -> Result<TrialConfig, EngineError> {
        Ok(match self.algorithm {
            Algorithm::BoAsha => {
                tpe_suggest(&self.history, self.space, &self.opts.tpe, &mut self.rng)?
            }
            _ => random_sample(self.space, &mut self.rng),
        })
    }

    fn close(
        &mut self,
        evaluator: &mut dyn Evaluator,
        slot: usize,
        index: usize,
        status: TrialStatus,
        at: f64,
    ) -> Result<(), EngineError> {
        let best_step = self.trials[index].best_checkpoint.map(|b| b.step);
        match evaluator.finish(slot, best_step) {
            Ok(fin) => {
                let t = &mut self.trials[index];
                t.test_metric_at_best = fin.test_metric_at_best;
                t.status = status;
                self.consecutive_failures = 0;
            }
            Err(e) => return self.fail(index, e),
        }
        let t = &mut self.trials[index];
        t.finished_at = Some(at);
        let objective = match status {
            TrialStatus::Completed => t.best_checkpoint.map(|b| b.val_metric),
            _ => t.last_val_metric(),
        };
        let obs_status = if status == TrialStatus::Completed {
            ObservationStatus::Completed
        } else {
            ObservationStatus::Pruned
        };
        if let Some(objective) = objective {
            self.history.push(t.config.clone(), objective, obs_status)?;
        }
        Ok(())
    }

    fn fail(&mut self, index: usize, err: EvalError) -> Result<(), EngineError> {
        log::warn!("trial {} failed: {err}", self.trials[index].trial_id);
        self.trials[index].status = TrialStatus::Failed;
        self.consecutive_failures += 1;
        if self.consecutive_failures >= MAX_CONSECUTIVE_FAILURES {
            return Err(EngineError::TooManyFailures(self.consecutive_failures, err));
        }
        Ok(())
    }
}

/// One HPO run of `algorithm` over `space` within `budget`.
pub fn run_hpo(
    algorithm: Algorithm,
    space: &SearchSpace,
    budget: &BudgetSpec,
    evaluator: &mut dyn Evaluator,
    rep_seed: u64,
    opts: &HpoOptions,
) -> Result<HpoRun, EngineError> {
    budget.validate()?;
    if opts.slots == 0 {
        return Err(EngineError::InvalidOptions("slots must be at least 1".into()));
    }
    if opts.epochs == 0 {
        return Err(EngineError::InvalidOptions("epochs must be at least 1".into()));
    }
    opts.tpe.validate()?;
    let deadline = budget.deadline();
    let plan = TrialPlan::new(opts.epochs, evaluator.task_size());
    let asha = if algorithm.prunes() {
        Some(opts.asha_for(&plan)?)
    } else {
        None
    };
    let mut run = Run {
        algorithm,
        space,
        opts,
        plan,
        asha,
        ledger: RungLedger::new(),
        history: ObservationHistory::new(),
        rng: ChaCha8Rng::seed_from_u64(rep_seed),
        trials: Vec::new(),
        consecutive_failures: 0,
    };
    let mut slots: Vec<SlotState> = (0..opts.slots).map(|_| SlotState::Idle).collect();
    let mut free_at: Vec<f64> = vec![0.0; opts.slots];

    loop {
        // next event: earliest time, then lowest slot
        let next = slots
            .iter()
            .enumerate()
            .filter_map(|(s, st)| match st {
                SlotState::Idle => Some((free_at[s], s)),
                SlotState::Busy(a) => Some((a.due, s)),
                SlotState::Retired => None,
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let Some((now, slot)) = next else { break };

        match std::mem::replace(&mut slots[slot], SlotState::Retired) {
            SlotState::Retired => unreachable!("retired slots are filtered"),
            SlotState::Idle => {
                if now >= deadline {
                    continue;
                }
                let trial_id = run.trials.len() as TrialId;
                let config = run.suggest()?;
                if !contains(space, &config)? {
                    return Err(EngineError::ConfigOutsideSpace(trial_id));
                }
                let start = TrialStart {
                    trial_id,
                    config: config.clone(),
                    plan: run.plan,
                    training_seed: opts.training_seed,
                };
                evaluator
                    .start(slot, &start)
                    .map_err(|source| EngineError::Start {
                        trial: trial_id,
                        source,
                    })?;
                log::debug!("t={now:.1} slot {slot}: start trial {trial_id}");
                run.trials.push(TrialRecord::new(trial_id, config, slot, now));
                let index = run.trials.len() - 1;
                slots[slot] = fetch(&mut run, evaluator, slot, index, now)?;
                if matches!(slots[slot], SlotState::Idle) {
                    free_at[slot] = now;
                }
            }
            SlotState::Busy(Active { index, pending, due }) => {
                let Some(report) = pending else {
                    // stream ended without a further report
                    run.close(evaluator, slot, index, TrialStatus::Completed, now)?;
                    free_at[slot] = now;
                    slots[slot] = SlotState::Idle;
                    continue;
                };
                debug_assert_eq!(due, now);
                let trial_id = run.trials[index].trial_id;
                run.trials[index].push(&report);
                let last = report.step >= run.plan.total_checkpoints();
                let status = if last {
                    Some(TrialStatus::Completed)
                } else if now >= deadline {
                    Some(TrialStatus::Truncated)
                } else if let Some(cfg) = &run.asha {
                    match run
                        .ledger
                        .on_report(cfg, trial_id, report.step, report.val_metric)?
                    {
                        Decision::Continue => None,
                        Decision::Stop => Some(TrialStatus::Pruned),
                    }
                } else {
                    None
                };
                match status {
                    None => {
                        slots[slot] = fetch(&mut run, evaluator, slot, index, now)?;
                        if matches!(slots[slot], SlotState::Idle) {
                            free_at[slot] = now;
                        }
                    }
                    Some(status) => {
                        if status != TrialStatus::Completed {
                            if let Err(e) = evaluator.stop(slot) {
                                run.fail(index, e)?;
                                run.trials[index].finished_at = Some(now);
                                free_at[slot] = now;
                                slots[slot] = SlotState::Idle;
                                continue;
                            }
                        }
                        run.close(evaluator, slot, index, status, now)?;
                        free_at[slot] = now;
                        slots[slot] = SlotState::Idle;
                    }
                }
            }
        }
    }

    let (best_trial, best) = select_best(&run.trials)?;
    let trials = run.trials;
    let scores = HpoRunScores {
        algorithm,
        best_trial,
        best_step: best.step,
        val_metric: best.val_metric,
        val_loss: best.val_loss,
        test_metric: trials[best_trial as usize].test_metric_at_best,
        trials_started: trials.len(),
        trials_completed: trials
            .iter()
            .filter(|t| t.status == TrialStatus::Completed)
            .count(),
        elapsed_seconds: trials
            .iter()
            .filter_map(|t| t.finished_at)
            .fold(0.0, f64::max),
        deadline_seconds: deadline,
    };
    Ok(HpoRun { scores, trials })
}

/// Pulls the next report for the trial on `slot`; a failure marks it failed and frees the slot.
fn fetch(
    run: &mut Run<'_>,
    evaluator: &mut dyn Evaluator,
    slot: usize,
    index: usize,
    now: f64,
) -> Result<SlotState, EngineError> {
    match evaluator.next_report(slot) {
        Ok(Some(report)) => {
            if !(report.cost_seconds >= 0.0 && report.cost_seconds.is_finite()) {
                let e = EvalError::Protocol(format!("invalid cost {}", report.cost_seconds));
                return fail_slot(run, evaluator, slot, index, now, e);
            }
            let expected_after = run.trials[index].reports.last().map_or(0, |r| r.step);
            if report.step <= expected_after {
                let e = EvalError::Protocol(format!(
                    "step {} does not follow step {expected_after}",
                    report.step
                ));
                return fail_slot(run, evaluator, slot, index, now, e);
            }
            if !report.val_metric.is_finite() || !report.val_loss.is_finite() {
                let e = EvalError::Protocol("non-finite metric".into());
                return fail_slot(run, evaluator, slot, index, now, e);
            }
            Ok(SlotState::Busy(Active {
                index,
                due: now + report.cost_seconds,
                pending: Some(report),
            }))
        }
        Ok(None) => Ok(SlotState::Busy(Active {
            index,
            pending: None,
            due: now,
        })),
        Err(e) => fail_slot(run, evaluator, slot, index, now, e),
    }
}

fn fail_slot(
    run: &mut Run<'_>,
    evaluator: &mut dyn Evaluator,
    slot: usize,
    index: usize,
    now: f64,
    err: EvalError,
) -> Result<SlotState, EngineError> {
    let _ = evaluator.stop(slot);
    let _ = evaluator.finish(slot, None);
    run.trials[index].finished_at = Some(now);
    run.fail(index, err)?;
    Ok(SlotState::Idle)
}

/// Trials grouped by slot, in start order.
pub fn slot_timeline(trials: &[TrialRecord]) -> BTreeMap<usize, Vec<(f64, f64)>> {
    let mut out: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for t in trials {
        out.entry(t.slot)
            .or_default()
            .push((t.started_at, t.finished_at.unwrap_or(f64::INFINITY)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{expand_grid_to_hpo, presets};
    use crate::surrogate::{presets::preset, SurrogateEvaluator};

    fn cp(step: u32, val: f64, loss: f64) -> CheckpointReport {
        CheckpointReport {
            step,
            val_metric: val,
            val_loss: loss,
        }
    }

    fn record(id: TrialId, reports: Vec<CheckpointReport>) -> TrialRecord {
        let mut t = TrialRecord::new(id, TrialConfig::new(), 0, 0.0);
        for r in reports {
            t.push(&Report {
                step: r.step,
                val_metric: r.val_metric,
                val_loss: r.val_loss,
                cost_seconds: 1.0,
            });
        }
        t
    }

    #[test]
    fn plan_counts() {
        assert_eq!(checkpoint_plan(3, TaskSize::Large).len(), 30);
        assert_eq!(checkpoint_plan(10, TaskSize::Small).len(), 50);
        assert_eq!(checkpoint_plan(1, TaskSize::Small), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn deadline_arithmetic() {
        assert_eq!(BudgetSpec::new(4.0, 1000.0).unwrap().deadline(), 4000.0);
        assert!(BudgetSpec::new(0.0, 1000.0).is_err());
        assert!(BudgetSpec::new(1.0, -1.0).is_err());
    }

    #[test]
    fn select_best_examples() {
        let mono = record(0, vec![cp(1, 80.0, 1.2), cp(2, 81.0, 1.19), cp(3, 82.0, 1.18)]);
        assert_eq!(select_best(&[mono]).unwrap(), (0, cp(3, 82.0, 1.18)));

        let a = record(0, vec![cp(1, 83.0, 1.0), cp(2, 84.5, 0.9), cp(3, 83.0, 1.0)]);
        let b = record(1, vec![cp(1, 82.0, 1.0), cp(2, 83.0, 1.0), cp(3, 84.0, 1.0)]);
        assert_eq!(select_best(&[a, b]).unwrap(), (0, cp(2, 84.5, 0.9)));

        let c = record(0, vec![cp(1, 84.1, 0.95), cp(2, 84.1, 0.82)]);
        assert_eq!(select_best(&[c]).unwrap().1.val_loss, 0.82);

        let d = record(3, vec![cp(1, 70.0, 1.0)]);
        let e = record(2, vec![cp(1, 70.0, 1.0)]);
        assert_eq!(select_best(&[d, e]).unwrap().0, 2);

        assert!(matches!(select_best(&[]), Err(EngineError::EmptyRun)));
        assert!(matches!(
            select_best(&[record(0, vec![])]),
            Err(EngineError::EmptyRun)
        ));
    }

    #[test]
    fn algorithm_tags_parse() {
        for a in Algorithm::ALL {
            assert_eq!(a.tag().parse::<Algorithm>().unwrap(), a);
            assert_eq!(
                serde_json::to_string(&a).unwrap(),
                format!("\"{}\"", a.tag())
            );
        }
        assert!("TPE".parse::<Algorithm>().is_err());
    }

    fn electra_setup(seed: u64) -> (SurrogateEvaluator, GridSpec, SearchSpace) {
        let grid = presets::electra_grid(3);
        let space = expand_grid_to_hpo(&grid, &presets::electra_rules()).unwrap();
        let eval = SurrogateEvaluator::new(preset("aligned", seed).unwrap(), TaskSize::Small)
            .unwrap();
        (eval, grid, space)
    }

    #[test]
    fn grid_runtime_is_serial_sum() {
        let (mut eval, grid, _) = electra_setup(0);
        let base = run_grid_search(&mut eval, &grid, 42).unwrap();
        assert_eq!(base.trials.len(), 3);
        // 3 configs x 15 checkpoints x 10 s
        assert_eq!(base.runtime_seconds, 450.0);
        assert!(base.trials.iter().all(|t| t.status == TrialStatus::Completed));
    }

    #[test]
    fn single_config_grid_best_is_that_config() {
        let (mut eval, _, _) = electra_setup(0);
        let grid = GridSpec::new(
            [("learning_rate".to_string(), vec![1e-4.into()])].into(),
            1,
        )
        .unwrap();
        let base = run_grid_search(&mut eval, &grid, 42).unwrap();
        assert_eq!(base.best_trial, 0);
    }

    #[test]
    fn hpo_respects_deadline_and_slots() {
        let (mut eval, grid, space) = electra_setup(1);
        let base = run_grid_search(&mut eval, &grid, 42).unwrap();
        for algo in Algorithm::ALL {
            for slots in [1, 3] {
                let budget = BudgetSpec::new(1.0, base.runtime_seconds).unwrap();
                let mut opts = HpoOptions::new(3);
                opts.slots = slots;
                let run = run_hpo(algo, &space, &budget, &mut eval, 7, &opts).unwrap();
                for t in &run.trials {
                    assert!(t.started_at < budget.deadline());
                    assert!(t.slot < slots);
                    assert_ne!(t.status, TrialStatus::Running);
                    assert!(contains(&space, &t.config).unwrap());
                }
                for intervals in slot_timeline(&run.trials).values() {
                    for w in intervals.windows(2) {
                        assert!(w[0].1 <= w[1].0);
                    }
                }
                let max = run
                    .trials
                    .iter()
                    .flat_map(|t| t.reports.iter())
                    .map(|r| r.val_metric)
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(run.scores.val_metric, max);
            }
        }
    }

    #[test]
    fn hpo_is_reproducible() {
        let (mut eval, _, space) = electra_setup(2);
        let budget = BudgetSpec::new(1.0, 450.0).unwrap();
        let opts = HpoOptions::new(3);
        let a = run_hpo(Algorithm::BoAsha, &space, &budget, &mut eval, 3, &opts).unwrap();
        let b = run_hpo(Algorithm::BoAsha, &space, &budget, &mut eval, 3, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn truncated_trials_stop_at_first_checkpoint_past_deadline() {
        let (mut eval, _, space) = electra_setup(2);
        // 1 trial of 15 checkpoints costs 150 s; deadline cuts the second one
        let budget = BudgetSpec::new(1.0, 200.0).unwrap();
        let run = run_hpo(
            Algorithm::RandomSearch,
            &space,
            &budget,
            &mut eval,
            1,
            &HpoOptions::new(3),
        )
        .unwrap();
        assert_eq!(run.trials.len(), 2);
        assert_eq!(run.trials[0].status, TrialStatus::Completed);
        assert_eq!(run.trials[1].status, TrialStatus::Truncated);
        assert_eq!(run.trials[1].reports.len(), 5);
        assert_eq!(run.trials[1].finished_at, Some(200.0));
    }
}
