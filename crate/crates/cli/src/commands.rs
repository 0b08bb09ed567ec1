//! Command implementations behind the `hpotriage` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use hpotriage_core::engine::{run_grid_search, run_hpo, Algorithm, BudgetSpec, EngineError, GridBaseline, HpoRun};
use hpotriage_core::procedure::{run_procedure, ProcedureError, ProcedureState};
use hpotriage_core::surrogate::{presets, SurrogateError};
use hpotriage_core::Evaluator;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Resolved};
use crate::replay::{replay_file, ReplayError, ReplayReport};
use crate::report::render;
use crate::store::{
    read_all, Record, ResultStore, RoundPayload, RunKey, RunSummary, ScoreRow, StoreError, TerminalPayload, TrialPayload,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Procedure(#[from] ProcedureError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Fixture(#[from] ReplayError),
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Fixture(_) => EXIT_USAGE,
            CliError::Mismatch(_) => EXIT_MISMATCH,
            CliError::Surrogate(_) => EXIT_USAGE,
            CliError::Store(_) | CliError::Engine(_) | CliError::Procedure(_) | CliError::Io(_) => EXIT_RUNTIME,
        }
    }
}

/// Flags shared by the commands that run experiments.
#[derive(Debug, Clone, Default)]
pub struct RunFlags {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub slots: Option<usize>,
    pub algo: Option<String>,
    pub budget_multiplier: Option<f64>,
    pub space: Option<String>,
}

struct Session {
    cfg: ExperimentConfig,
    resolved: Resolved,
    evaluator: Box<dyn Evaluator>,
    store: ResultStore,
}

fn open_session(flags: &RunFlags) -> Result<Session, CliError> {
    let mut cfg = ExperimentConfig::load(&flags.config)?;
    cfg.apply_env()?;
    if let Some(seed) = flags.seed {
        cfg.set_seed(seed);
    }
    if let Some(slots) = flags.slots {
        cfg.slots = slots;
    }
    let resolved = cfg.resolve()?;
    let evaluator = cfg.evaluator()?;
    let out = flags
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.jsonl", cfg.name)));
    let store = ResultStore::open(&out, &cfg.name)?;
    Ok(Session {
        cfg,
        resolved,
        evaluator,
        store,
    })
}

fn persist_trials(
    store: &mut ResultStore,
    key: &RunKey,
    trials: &[hpotriage_core::TrialRecord],
) -> Result<Vec<u64>, StoreError> {
    trials
        .iter()
        .map(|t| {
            store.persist(Record::Trial(TrialPayload {
                run: key.clone(),
                trial: t.clone(),
            }))
        })
        .collect()
}

fn persist_grid(store: &mut ResultStore, g: &GridBaseline) -> Result<u64, StoreError> {
    let key = RunKey {
        label: "grid".into(),
        rep_seed: None,
        budget_multiplier: None,
        space_label: None,
    };
    let ids = persist_trials(store, &key, &g.trials)?;
    store.persist(Record::RunSummary(RunSummary {
        run: key,
        scores: ScoreRow::from(g.scores),
        best_trial: g.best_trial,
        best_step: g.best_step,
        trials_started: g.trials.len(),
        trials_completed: g.trials.len(),
        elapsed_seconds: g.runtime_seconds,
        deadline_seconds: None,
        trial_records: ids,
    }))
}

fn persist_run(store: &mut ResultStore, key: RunKey, run: &HpoRun) -> Result<u64, StoreError> {
    let ids = persist_trials(store, &key, &run.trials)?;
    let s = &run.scores;
    store.persist(Record::RunSummary(RunSummary {
        run: key,
        scores: ScoreRow {
            val_metric: s.val_metric,
            val_loss: s.val_loss,
            test_metric: s.test_metric,
        },
        best_trial: s.best_trial,
        best_step: s.best_step,
        trials_started: s.trials_started,
        trials_completed: s.trials_completed,
        elapsed_seconds: s.elapsed_seconds,
        deadline_seconds: Some(s.deadline_seconds),
        trial_records: ids,
    }))
}

fn run_grid(session: &mut Session) -> Result<GridBaseline, CliError> {
    let g = run_grid_search(session.evaluator.as_mut(), &session.resolved.grid, session.cfg.training_seed)?;
    persist_grid(&mut session.store, &g)?;
    Ok(g)
}

fn report_store(path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let records = read_all(path)?;
    out.write_all(render(&records).as_bytes())?;
    Ok(())
}

fn pick_algorithms(cfg: &ExperimentConfig, algo: Option<&str>) -> Result<Vec<Algorithm>, CliError> {
    match algo {
        None => Ok(cfg.algorithms.clone()),
        Some(name) => {
            let a: Algorithm = name.parse().map_err(|e: hpotriage_core::engine::UnknownAlgorithm| CliError::Usage(e.to_string()))?;
            Ok(vec![a])
        }
    }
}

pub fn grid(flags: &RunFlags, out: &mut dyn Write) -> Result<(), CliError> {
    let mut session = open_session(flags)?;
    let g = run_grid(&mut session)?;
    writeln!(
        out,
        "grid: {} trials, {:.1}s (1GST), best trial {} val {:.2} test {:.2}",
        g.trials.len(),
        g.runtime_seconds,
        g.best_trial,
        g.scores.val_metric,
        g.scores.test_metric
    )?;
    Ok(())
}

pub fn hpo(flags: &RunFlags, out: &mut dyn Write) -> Result<(), CliError> {
    let mut session = open_session(flags)?;
    let algos = pick_algorithms(&session.cfg, flags.algo.as_deref())?;
    let multiplier = flags.budget_multiplier.unwrap_or(session.cfg.budget_ladder[0]);
    let space = match &flags.space {
        None => session.resolved.full.clone(),
        Some(label) => session
            .resolved
            .rungs
            .iter()
            .find(|s| s.label() == label)
            .cloned()
            .ok_or_else(|| {
                let known: Vec<&str> = session.resolved.rungs.iter().map(|s| s.label()).collect();
                CliError::Usage(format!("unknown space `{label}` (configured: {})", known.join(", ")))
            })?,
    };
    let g = run_grid(&mut session)?;
    let gst = session.cfg.gst_seconds.unwrap_or(g.runtime_seconds);
    let budget = BudgetSpec::new(multiplier, gst)?;
    let opts = session.cfg.hpo_options(session.resolved.grid.epochs());
    for algo in algos {
        for &seed in &session.cfg.rep_seeds.clone() {
            let run = run_hpo(algo, &space, &budget, session.evaluator.as_mut(), seed, &opts)?;
            let key = RunKey {
                label: algo.tag().to_string(),
                rep_seed: Some(seed),
                budget_multiplier: Some(multiplier),
                space_label: Some(space.label().to_string()),
            };
            persist_run(&mut session.store, key, &run)?;
        }
    }
    report_store(session.store.path(), out)
}

fn persist_procedure(
    store: &mut ResultStore,
    algo: Algorithm,
    rep_seeds: &[u64],
    state: &ProcedureState,
) -> Result<(), StoreError> {
    let mut round_ids = Vec::new();
    for r in &state.history {
        let mut summaries = Vec::new();
        for (run, seed) in r.runs.iter().zip(rep_seeds) {
            let key = RunKey {
                label: algo.tag().to_string(),
                rep_seed: Some(*seed),
                budget_multiplier: Some(r.budget_multiplier),
                space_label: Some(r.space_label.clone()),
            };
            summaries.push(persist_run(store, key, run)?);
        }
        round_ids.push(store.persist(Record::Round(RoundPayload {
            algorithm: algo.tag().to_string(),
            round: r.round,
            space_label: r.space_label.clone(),
            budget_multiplier: r.budget_multiplier,
            run_summaries: summaries,
            rep_verdicts: r.verdict.reps.clone(),
            kind: r.verdict.kind,
            average: r.verdict.average,
            action: r.action,
        }))?);
    }
    if let (Some(outcome), Some(summary)) = (state.outcome, state.summary_line()) {
        store.persist(Record::ProcedureTerminal(TerminalPayload {
            algorithm: algo.tag().to_string(),
            outcome,
            summary,
            rounds: round_ids,
        }))?;
    }
    Ok(())
}

pub fn troubleshoot(flags: &RunFlags, out: &mut dyn Write) -> Result<(), CliError> {
    let mut session = open_session(flags)?;
    let algos = pick_algorithms(&session.cfg, flags.algo.as_deref())?;
    let g = run_grid(&mut session)?;
    let mut baseline = g.clone();
    if let Some(gst) = session.cfg.gst_seconds {
        baseline.runtime_seconds = gst;
    }
    let pcfg = session.cfg.procedure_config(&session.resolved);
    for algo in algos {
        let result = run_procedure(session.evaluator.as_mut(), &session.resolved.grid, &baseline, algo, &pcfg);
        match result {
            Ok(state) => persist_procedure(&mut session.store, algo, &pcfg.rep_seeds, &state)?,
            Err(ProcedureError::Engine { state, round, seed, source }) => {
                persist_procedure(&mut session.store, algo, &pcfg.rep_seeds, &state)?;
                return Err(ProcedureError::Engine { state, round, seed, source }.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    report_store(session.store.path(), out)
}

pub fn report(store: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    report_store(store, out)
}

/// Replays every fixture; fails on the first fixture with an unexplained divergence.
pub fn replay(fixtures: &[PathBuf], out: &mut dyn Write) -> Result<Vec<ReplayReport>, CliError> {
    if fixtures.is_empty() {
        return Err(CliError::Usage("replay needs at least one fixture file".into()));
    }
    let mut reports = Vec::new();
    let mut first: Option<String> = None;
    for path in fixtures {
        let r = replay_file(path)?;
        out.write_all(r.render().as_bytes())?;
        if first.is_none() {
            if let Some(m) = r.first_divergence() {
                first = Some(format!("{}: first diverging cell: {m}", path.display()));
            }
        }
        reports.push(r);
    }
    match first {
        Some(msg) => Err(CliError::Mismatch(msg)),
        None => Ok(reports),
    }
}

pub fn surrogate_gen(preset: &str, seed: u64, out_path: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = presets::preset(preset, seed)?;
    let mut text = serde_json::to_string_pretty(&spec).expect("specs always serialize");
    text.push('\n');
    match out_path {
        Some(p) => std::fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}
