//! The troubleshooting state machine: raise the budget while HPO underperforms,
//! shrink the search space while it overfits, and stop at a terminal outcome.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run_hpo, Algorithm, BudgetSpec, EngineError, Evaluator, GridBaseline, HpoOptions, HpoRun};
use crate::space::{minimal_space, reduce_space, Domain, GridSpec, Scalar, SearchSpace, SpaceError, TrialConfig};
use crate::verdict::{classify_round, RoundKind, RoundVerdict, RunScores, VerdictError};

#[derive(Debug, Error)]
pub enum ProcedureError {
    #[error("procedure already terminated with outcome {0}")]
    AlreadyTerminal(Outcome),
    #[error("invalid ladder: {0}")]
    InvalidLadder(String),
    #[error("round {round}, rep seed {seed}: {source}")]
    Engine {
        round: usize,
        seed: u64,
        #[source]
        source: EngineError,
        state: Box<ProcedureState>,
    },
    #[error("round {round}: best trial has no test metric")]
    MissingTestMetric { round: usize, state: Box<ProcedureState> },
    #[error(transparent)]
    Verdict(#[from] VerdictError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Succeeded,
    OverfitsTask,
    ToBeDetermined,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Succeeded => "succeeded",
            Outcome::OverfitsTask => "overfits-task",
            Outcome::ToBeDetermined => "tbd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Succeed,
    IncreaseBudget,
    ReduceSpace,
    DeclareOverfitsTask,
    DeclareTBD,
}

impl Action {
    /// Short annotation used by the published procedure tables.
    pub fn annotation(self) -> &'static str {
        match self {
            Action::Succeed => "succeeds",
            Action::IncreaseBudget => "up-res",
            Action::ReduceSpace => "down-space",
            Action::DeclareOverfitsTask => "overfits-task",
            Action::DeclareTBD => "tbd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub space_label: String,
    pub budget_multiplier: f64,
    pub runs: Vec<HpoRun>,
    pub verdict: RoundVerdict,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureState {
    pub round: usize,
    pub budget_ladder: Vec<f64>,
    pub budget_rung: usize,
    /// Number of space rungs; the last one is always the minimal space.
    pub space_rungs: usize,
    pub space_rung: usize,
    pub space_label: String,
    pub history: Vec<RoundRecord>,
    pub outcome: Option<Outcome>,
}

impl ProcedureState {
    pub fn new(budget_ladder: Vec<f64>, space_rungs: usize, first_label: impl Into<String>) -> Result<Self, ProcedureError> {
        if budget_ladder.is_empty() || space_rungs == 0 {
            return Err(ProcedureError::InvalidLadder("ladders need at least one rung".into()));
        }
        if budget_ladder.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(ProcedureError::InvalidLadder("budget multipliers must be positive".into()));
        }
        if budget_ladder.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ProcedureError::InvalidLadder("budget ladder must increase".into()));
        }
        Ok(Self {
            round: 0,
            budget_ladder,
            budget_rung: 0,
            space_rungs,
            space_rung: 0,
            space_label: first_label.into(),
            history: Vec::new(),
            outcome: None,
        })
    }

    pub fn budget_multiplier(&self) -> f64 {
        self.budget_ladder[self.budget_rung]
    }

    /// Applies `action` to the rung indices and outcome. `next_space_rung`
    /// overrides the default one-step move on ReduceSpace.
    pub fn apply(&mut self, action: Action, next_space_rung: Option<usize>) {
        match action {
            Action::Succeed => self.outcome = Some(Outcome::Succeeded),
            Action::IncreaseBudget => self.budget_rung += 1,
            Action::ReduceSpace => {
                self.space_rung = next_space_rung
                    .unwrap_or(self.space_rung + 1)
                    .min(self.space_rungs - 1)
            }
            Action::DeclareOverfitsTask => self.outcome = Some(Outcome::OverfitsTask),
            Action::DeclareTBD => self.outcome = Some(Outcome::ToBeDetermined),
        }
        self.round += 1;
    }

    /// Terminal label in the style "succeeds w/ 1GST, S_-wr", "overfits", "TBD".
    pub fn summary_line(&self) -> Option<String> {
        Some(match self.outcome? {
            Outcome::Succeeded => format!(
                "succeeds w/ {}GST, {}",
                self.budget_multiplier(),
                self.space_label
            ),
            Outcome::OverfitsTask => "overfits".to_string(),
            Outcome::ToBeDetermined => "TBD".to_string(),
        })
    }
}

pub fn next_action(state: &ProcedureState, verdict: RoundKind) -> Result<Action, ProcedureError> {
    if let Some(o) = state.outcome {
        return Err(ProcedureError::AlreadyTerminal(o));
    }
    Ok(match verdict {
        RoundKind::SuccessRound => Action::Succeed,
        RoundKind::OverfitRound if state.space_rung + 1 < state.space_rungs => Action::ReduceSpace,
        RoundKind::OverfitRound => Action::DeclareOverfitsTask,
        RoundKind::UnderperformRound if state.budget_rung + 1 < state.budget_ladder.len() => {
            Action::IncreaseBudget
        }
        RoundKind::UnderperformRound => Action::DeclareTBD,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningParams {
    /// Share of all overfit runs whose deviation must point the same way.
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Median |deviation| must reach `delta * |grid value|`.
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_theta() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.25
}

impl Default for MiningParams {
    fn default() -> Self {
        Self {
            theta: default_theta(),
            delta: default_delta(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    /// Already fixed in the current space.
    Fixed,
    /// Several grid values; the domain cannot shrink without losing grid coverage.
    GridHull,
    /// The grid value sits on a domain boundary, so deviations only go one way.
    GridOnBoundary,
    /// No overfit run carries a numeric value for it.
    NoEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub name: String,
    pub grid_value: Scalar,
    pub lower: usize,
    pub higher: usize,
    pub equal: usize,
    pub median_abs_deviation: f64,
}

impl Evidence {
    pub fn runs(&self) -> usize {
        self.lower + self.higher + self.equal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixProposal {
    pub fixes: Vec<Evidence>,
    pub rejected: Vec<Evidence>,
    pub excluded: BTreeMap<String, ExclusionReason>,
}

impl FixProposal {
    pub fn is_empty(&self) -> bool {
        self.fixes.is_empty()
    }

    pub fn as_fixes(&self) -> Vec<(String, Scalar)> {
        self.fixes
            .iter()
            .map(|e| (e.name.clone(), e.grid_value.clone()))
            .collect()
    }
}

/// One overfit run's best configuration next to the grid's best configuration for the same task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningCase {
    pub hpo_best: TrialConfig,
    pub grid_best: TrialConfig,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn on_boundary(domain: &Domain, value: f64) -> bool {
    match domain.bounds() {
        Some((lo, hi)) => {
            let tol = crate::space::MEMBERSHIP_TOLERANCE;
            (value - lo).abs() <= tol || (value - hi).abs() <= tol
        }
        None => false,
    }
}

/// Proposes hyperparameters to fix at their grid value from the overfit runs' best trials.
pub fn mine_fix_candidates(
    cases: &[MiningCase],
    space: &SearchSpace,
    grid: &GridSpec,
    params: &MiningParams,
) -> FixProposal {
    let mut proposal = FixProposal {
        fixes: Vec::new(),
        rejected: Vec::new(),
        excluded: BTreeMap::new(),
    };
    for (name, domain) in space.entries() {
        if domain.is_fixed() {
            proposal.excluded.insert(name.clone(), ExclusionReason::Fixed);
            continue;
        }
        if grid.values(name).is_some_and(|v| v.len() > 1) {
            proposal.excluded.insert(name.clone(), ExclusionReason::GridHull);
            continue;
        }
        let grid_value = grid
            .values(name)
            .and_then(|v| v.first().cloned())
            .or_else(|| cases.iter().find_map(|c| c.grid_best.get(name).cloned()));
        let Some(grid_value) = grid_value else {
            proposal.excluded.insert(name.clone(), ExclusionReason::NoEvidence);
            continue;
        };
        let Some(g) = grid_value.as_f64() else {
            proposal.excluded.insert(name.clone(), ExclusionReason::NoEvidence);
            continue;
        };
        if on_boundary(domain, g) {
            proposal.excluded.insert(name.clone(), ExclusionReason::GridOnBoundary);
            continue;
        }
        let deviations: Vec<f64> = cases
            .iter()
            .filter_map(|c| {
                let v = c.hpo_best.get_f64(name)?;
                let reference = c.grid_best.get_f64(name).unwrap_or(g);
                Some(v - reference)
            })
            .collect();
        if deviations.is_empty() {
            proposal.excluded.insert(name.clone(), ExclusionReason::NoEvidence);
            continue;
        }
        let evidence = Evidence {
            name: name.clone(),
            grid_value: grid_value.clone(),
            lower: deviations.iter().filter(|d| **d < 0.0).count(),
            higher: deviations.iter().filter(|d| **d > 0.0).count(),
            equal: deviations.iter().filter(|d| **d == 0.0).count(),
            median_abs_deviation: median(deviations.iter().map(|d| d.abs()).collect()),
        };
        let n = evidence.runs() as f64;
        let agree = evidence.lower.max(evidence.higher) as f64;
        let consistent = agree >= params.theta * n - 1e-12;
        let large = evidence.median_abs_deviation >= params.delta * g.abs();
        if consistent && large {
            proposal.fixes.push(evidence);
        } else {
            proposal.rejected.push(evidence);
        }
    }
    proposal
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpaceLadder {
    /// Explicit rungs, widest first; the last should be the minimal space.
    Predeclared(Vec<SearchSpace>),
    /// Widest space; the middle rung is mined from overfit runs, the last is minimal.
    Mining { full: SearchSpace, params: MiningParams },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureConfig {
    pub budget_ladder: Vec<f64>,
    pub space_ladder: SpaceLadder,
    pub rep_seeds: Vec<u64>,
    pub epsilon: f64,
    pub hpo: HpoOptions,
}

fn scores_of(run: &HpoRun) -> Option<RunScores> {
    run.scores.run_scores()
}

/// Runs rounds of `reps` HPO runs until the state machine reaches a terminal outcome.
pub fn run_procedure(
    evaluator: &mut dyn Evaluator,
    grid: &GridSpec,
    baseline: &GridBaseline,
    algorithm: Algorithm,
    cfg: &ProcedureConfig,
) -> Result<ProcedureState, ProcedureError> {
    if cfg.rep_seeds.is_empty() {
        return Err(ProcedureError::InvalidLadder("at least one repetition is required".into()));
    }
    let (mut spaces, mining) = match &cfg.space_ladder {
        SpaceLadder::Predeclared(rungs) => {
            if rungs.is_empty() {
                return Err(ProcedureError::InvalidLadder("space ladder is empty".into()));
            }
            (rungs.iter().cloned().map(Some).collect::<Vec<_>>(), None)
        }
        SpaceLadder::Mining { full, params } => (
            vec![Some(full.clone()), None, Some(minimal_space(full, grid))],
            Some(*params),
        ),
    };
    let first_label = spaces[0].as_ref().expect("first rung").label().to_string();
    let mut state = ProcedureState::new(cfg.budget_ladder.clone(), spaces.len(), first_label)?;
    let grid_best = baseline.trials[baseline.best_trial as usize].config.clone();

    while state.outcome.is_none() {
        let space = spaces[state.space_rung].clone().expect("current rung is materialized");
        let budget = BudgetSpec {
            gst_multiplier: state.budget_multiplier(),
            gst_seconds: baseline.runtime_seconds,
        };
        let mut runs = Vec::with_capacity(cfg.rep_seeds.len());
        for &seed in &cfg.rep_seeds {
            match run_hpo(algorithm, &space, &budget, evaluator, seed, &cfg.hpo) {
                Ok(run) => runs.push(run),
                Err(source) => {
                    return Err(ProcedureError::Engine {
                        round: state.round,
                        seed,
                        source,
                        state: Box::new(state),
                    })
                }
            }
        }
        let Some(reps) = runs.iter().map(scores_of).collect::<Option<Vec<_>>>() else {
            return Err(ProcedureError::MissingTestMetric {
                round: state.round,
                state: Box::new(state),
            });
        };
        let verdict = classify_round(&reps, &baseline.scores, cfg.epsilon)?;
        let action = next_action(&state, verdict.kind)?;
        log::info!(
            "{algorithm} round {} [{}GST, {}]: {:?} -> {:?}",
            state.round,
            state.budget_multiplier(),
            space.label(),
            verdict.kind,
            action
        );

        let mut jump = None;
        if action == Action::ReduceSpace && spaces[state.space_rung + 1].is_none() {
            let params = mining.expect("unmaterialized rungs only exist in mining mode");
            let cases: Vec<MiningCase> = runs
                .iter()
                .zip(&verdict.reps)
                .filter(|(_, v)| v.is_overfit())
                .map(|(run, _)| MiningCase {
                    hpo_best: run.trials[run.scores.best_trial as usize].config.clone(),
                    grid_best: grid_best.clone(),
                })
                .collect();
            let proposal = mine_fix_candidates(&cases, &space, grid, &params);
            if proposal.is_empty() {
                jump = Some(state.space_rung + 2);
            } else {
                spaces[state.space_rung + 1] = Some(reduce_space(&space, &proposal.as_fixes())?);
            }
        }
        state.history.push(RoundRecord {
            round: state.round,
            space_label: space.label().to_string(),
            budget_multiplier: state.budget_multiplier(),
            runs,
            verdict,
            action,
        });
        state.apply(action, jump);
        state.space_label = spaces[state.space_rung]
            .as_ref()
            .map(|s| s.label().to_string())
            .unwrap_or_default();
    }
    // the label of the space the terminal round ran in
    if let Some(last) = state.history.last() {
        state.space_label = last.space_label.clone();
    }
    Ok(state)
}
