//! Replays published tables through the verdict, procedure and mining logic.
//!
//! Every fixture kind reduces to a list of checks; a check that fails becomes a
//! [`Mismatch`]. Mismatches whose cell id is listed in the fixture's `known`
//! table are reported but do not fail the replay.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use thiserror::Error;

use hpotriage_core::procedure::{
    mine_fix_candidates, next_action, Action, ExclusionReason, FixProposal, MiningCase, MiningParams, ProcedureState,
};
use hpotriage_core::space::{expand_grid_to_hpo, presets};
use hpotriage_core::verdict::{classify_run, RoundKind, Verdict, DEFAULT_EPSILON};
use hpotriage_core::{RunScores, Scalar, TrialConfig};

const SLACK: f64 = 1e-9;
/// Published averages are rounded (sometimes truncated) to one decimal.
const AVERAGE_TOLERANCE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot read fixture {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: at `{key}`: {message}")]
    Parse { path: String, key: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MismatchKind {
    /// A published verdict shading disagrees with the scores.
    Shading,
    /// A published action annotation disagrees with the state machine.
    Action,
    /// A published terminal label disagrees with the state machine.
    Terminal,
    /// A published number disagrees with one derived from other published numbers.
    Value,
    /// Mining output differs from the expectation.
    Mining,
    /// A published count or runtime breaks the expected pattern.
    Pattern,
    /// A `known` entry that no longer matches any mismatch.
    StaleKnown,
}

impl fmt::Display for MismatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MismatchKind::Shading => "shading",
            MismatchKind::Action => "action",
            MismatchKind::Terminal => "terminal",
            MismatchKind::Value => "value",
            MismatchKind::Mining => "mining",
            MismatchKind::Pattern => "pattern",
            MismatchKind::StaleKnown => "stale-known",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub kind: MismatchKind,
    pub cell: String,
    pub expected: String,
    pub actual: String,
    pub known: bool,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} mismatch at {}: published {}, derived {}",
            self.kind, self.cell, self.expected, self.actual
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReplayReport {
    pub fixture: String,
    pub title: String,
    pub lines: Vec<String>,
    pub mismatches: Vec<Mismatch>,
    pub checks: usize,
    /// Action sequences per case id, in round order.
    pub actions: BTreeMap<String, Vec<Action>>,
    /// Verdicts per run label (walkthrough fixtures).
    pub verdicts: Vec<(String, PublishedVerdict)>,
    /// Outcome of mining fixtures.
    pub proposal: Option<FixProposal>,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.first_divergence().is_none()
    }

    pub fn first_divergence(&self) -> Option<&Mismatch> {
        self.mismatches.iter().find(|m| !m.known)
    }

    pub fn count(&self, kind: MismatchKind) -> usize {
        self.mismatches.iter().filter(|m| m.kind == kind).count()
    }

    pub fn render(&self) -> String {
        let mut out = format!("# {} ({})\n", self.title, self.fixture);
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        for m in &self.mismatches {
            let tag = if m.known { "known" } else { "MISMATCH" };
            out.push_str(&format!("{tag}: {m}\n"));
        }
        let unknown = self.mismatches.iter().filter(|m| !m.known).count();
        out.push_str(&format!(
            "{} checks, {} mismatches ({} known)\n",
            self.checks,
            self.mismatches.len(),
            self.mismatches.len() - unknown
        ));
        out
    }

    fn check(&mut self, ok: bool, kind: MismatchKind, cell: impl Into<String>, expected: impl fmt::Display, actual: impl fmt::Display) {
        self.checks += 1;
        if !ok {
            self.mismatches.push(Mismatch {
                kind,
                cell: cell.into(),
                expected: expected.to_string(),
                actual: actual.to_string(),
                known: false,
            });
        }
    }

    fn pin_known(&mut self, known: &[String]) {
        let known: BTreeSet<&str> = known.iter().map(String::as_str).collect();
        let mut used = BTreeSet::new();
        for m in &mut self.mismatches {
            if known.contains(m.cell.as_str()) {
                m.known = true;
                used.insert(m.cell.clone());
            }
        }
        for k in known {
            if !used.contains(k) {
                self.mismatches.push(Mismatch {
                    kind: MismatchKind::StaleKnown,
                    cell: k.to_string(),
                    expected: "a mismatch".into(),
                    actual: "none".into(),
                    known: false,
                });
            }
        }
    }
}

/// Verdict derivable from published (rounded) scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PublishedVerdict {
    Known(Verdict),
    /// Validation ties the grid and test is lower, but no losses are published.
    NeedsLoss,
}

impl fmt::Display for PublishedVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PublishedVerdict::Known(v) => verdict_name(*v),
            PublishedVerdict::NeedsLoss => "needs-loss",
        })
    }
}

pub fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Overfit => "overfit",
        Verdict::WeakOverfit => "weak-overfit",
        Verdict::Underperform => "underperform",
        Verdict::SuccessCandidate => "success-candidate",
    }
}

fn kind_name(k: RoundKind) -> &'static str {
    match k {
        RoundKind::OverfitRound => "overfit",
        RoundKind::SuccessRound => "success",
        RoundKind::UnderperformRound => "underperform",
    }
}

/// A published score pair, with the validation loss when the source gives one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub val: f64,
    pub test: f64,
    pub loss: Option<f64>,
}

pub fn published_verdict(cell: &Cell, grid: &Cell, eps: f64) -> PublishedVerdict {
    let val_tie = (cell.val - grid.val).abs() <= eps + SLACK;
    let test_lower = cell.test < grid.test - eps - SLACK;
    match (cell.loss, grid.loss) {
        (Some(l), Some(g)) => {
            let v = classify_run(&RunScores::new(cell.val, l, cell.test), &RunScores::new(grid.val, g, grid.test), eps)
                .expect("finite published scores");
            PublishedVerdict::Known(v)
        }
        _ if val_tie && test_lower => PublishedVerdict::NeedsLoss,
        _ => {
            let v = classify_run(&RunScores::new(cell.val, 0.0, cell.test), &RunScores::new(grid.val, 0.0, grid.test), eps)
                .expect("finite published scores");
            PublishedVerdict::Known(v)
        }
    }
}

fn greater(a: f64, b: f64, eps: f64) -> bool {
    a - b > eps + SLACK
}

fn success_average(val: f64, test: f64, grid: &Cell, eps: f64) -> bool {
    greater(val, grid.val, eps) && greater(test, grid.test, eps)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn parse_number(s: &str) -> Option<f64> {
    // "a/b" cells report two metrics; the second is the one the procedure uses
    s.rsplit('/').next()?.parse().ok().filter(|x: &f64| x.is_finite())
}

fn parse_cell(text: &str) -> Result<(Cell, Option<String>), String> {
    let parts: Vec<&str> = text.split_whitespace().collect();
    if parts.len() < 2 {
        return Err(format!("cell `{text}` needs at least validation and test scores"));
    }
    let num = |s: &str| parse_number(s).ok_or_else(|| format!("cell `{text}`: `{s}` is not a number"));
    let val = num(parts[0])?;
    let test = num(parts[1])?;
    let mut loss = None;
    let mut tag = None;
    for p in &parts[2..] {
        match p.parse::<f64>() {
            Ok(l) if loss.is_none() && tag.is_none() => loss = Some(l),
            _ if tag.is_none() => tag = Some(p.to_string()),
            _ => return Err(format!("cell `{text}` has trailing `{p}`")),
        }
    }
    Ok((Cell { val, test, loss }, tag))
}

fn parse_action(s: &str) -> Option<Action> {
    Some(match s {
        "succeeds" => Action::Succeed,
        "up-res" => Action::IncreaseBudget,
        "down-space" => Action::ReduceSpace,
        "overfits-task" => Action::DeclareOverfitsTask,
        "tbd" => Action::DeclareTBD,
        _ => return None,
    })
}

fn deserialize<T: DeserializeOwned>(value: toml::Value, origin: &str) -> Result<T, ReplayError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        ReplayError::Parse {
            path: origin.to_string(),
            key: if key.is_empty() { ".".into() } else { key },
            message: e.into_inner().to_string(),
        }
    })
}

fn invalid(origin: &str, message: impl Into<String>) -> ReplayError {
    ReplayError::Invalid {
        path: origin.to_string(),
        message: message.into(),
    }
}

// ---------- verdicts (walkthrough) ----------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictFixture {
    #[allow(dead_code)]
    kind: String,
    title: String,
    #[serde(default = "default_eps")]
    epsilon: f64,
    grid: String,
    procedure: Option<WalkthroughProcedure>,
    runs: Vec<VerdictRun>,
    #[serde(default)]
    known: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WalkthroughProcedure {
    budget_ladder: Vec<f64>,
    space_ladder: Vec<String>,
    actions: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictRun {
    label: String,
    cell: String,
    expect: String,
}

fn default_eps() -> f64 {
    DEFAULT_EPSILON
}

fn expect_matches(expect: &str, got: PublishedVerdict) -> Option<bool> {
    Some(match expect {
        "overfit" => got == PublishedVerdict::Known(Verdict::Overfit),
        "weak-overfit" => got == PublishedVerdict::Known(Verdict::WeakOverfit),
        "underperform" => got == PublishedVerdict::Known(Verdict::Underperform),
        "success-candidate" => got == PublishedVerdict::Known(Verdict::SuccessCandidate),
        "unshaded" => !matches!(got, PublishedVerdict::Known(v) if v.is_overfit()),
        _ => return None,
    })
}

fn round_prefix(label: &str) -> Option<usize> {
    let mut it = label.split_whitespace();
    if it.next()? != "round" {
        return None;
    }
    it.next()?.parse().ok()
}

fn replay_verdicts(fx: VerdictFixture, origin: &str, report: &mut ReplayReport) -> Result<(), ReplayError> {
    report.title = fx.title.clone();
    let (grid, _) = parse_cell(&fx.grid).map_err(|m| invalid(origin, m))?;
    let mut rounds: BTreeMap<usize, Vec<(Cell, PublishedVerdict)>> = BTreeMap::new();
    for run in &fx.runs {
        let (cell, tag) = parse_cell(&run.cell).map_err(|m| invalid(origin, m))?;
        if tag.is_some() {
            return Err(invalid(origin, format!("run `{}`: shading goes in `expect`", run.label)));
        }
        let got = published_verdict(&cell, &grid, fx.epsilon);
        let ok = expect_matches(&run.expect, got)
            .ok_or_else(|| invalid(origin, format!("run `{}`: unknown expectation `{}`", run.label, run.expect)))?;
        report.lines.push(format!("{:<14} {:<18} -> {}", run.label, run.cell, got));
        report.check(ok, MismatchKind::Shading, run.label.clone(), &run.expect, got);
        report.verdicts.push((run.label.clone(), got));
        if let Some(r) = round_prefix(&run.label) {
            rounds.entry(r).or_default().push((cell, got));
        }
    }

    if let Some(p) = fx.procedure {
        if rounds.is_empty() || rounds.keys().copied().ne(0..rounds.len()) {
            return Err(invalid(origin, "procedure replay needs runs labelled `round 0 ...` onwards"));
        }
        let mut state = ProcedureState::new(p.budget_ladder, p.space_ladder.len(), p.space_ladder[0].clone())
            .map_err(|e| invalid(origin, e.to_string()))?;
        let mut actions = Vec::new();
        for reps in rounds.values() {
            if state.outcome.is_some() {
                break;
            }
            let any_overfit = reps.iter().any(|(_, v)| matches!(v, PublishedVerdict::Known(v) if v.is_overfit()));
            let (val, test) = (mean(reps.iter().map(|(c, _)| c.val)), mean(reps.iter().map(|(c, _)| c.test)));
            let avg_overfit = greater(val, grid.val, fx.epsilon) && test < grid.test - fx.epsilon - SLACK;
            let kind = if any_overfit || avg_overfit {
                RoundKind::OverfitRound
            } else if success_average(val, test, &grid, fx.epsilon) {
                RoundKind::SuccessRound
            } else {
                RoundKind::UnderperformRound
            };
            let a = next_action(&state, kind).map_err(|e| invalid(origin, e.to_string()))?;
            state.apply(a, None);
            state.space_label = p.space_ladder[state.space_rung].clone();
            actions.push(a);
        }
        let derived: Vec<&str> = actions.iter().map(|a| a.annotation()).collect();
        report.lines.push(format!("actions: [{}]", derived.join(", ")));
        report.check(
            derived == p.actions,
            MismatchKind::Action,
            "procedure",
            format!("[{}]", p.actions.join(", ")),
            format!("[{}]", derived.join(", ")),
        );
        report.actions.insert("walkthrough".into(), actions);
    }
    report.pin_known(&fx.known);
    Ok(())
}

// ---------- procedure tables ----------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProcedureFixture {
    #[allow(dead_code)]
    kind: String,
    title: String,
    #[serde(default = "default_eps")]
    epsilon: f64,
    budget_ladder: Vec<f64>,
    space_ladder: Vec<String>,
    #[serde(default)]
    known: Vec<String>,
    cases: Vec<ProcedureCase>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProcedureCase {
    task: String,
    algorithm: String,
    grid: String,
    published: String,
    rounds: Vec<PublishedRound>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PublishedRound {
    before: Option<String>,
    reps: Vec<String>,
    avg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shade {
    None,
    Overfit,
    Weak,
    Success,
}

fn parse_shade(tag: Option<&str>) -> Option<Shade> {
    Some(match tag {
        None => Shade::None,
        Some("overfit") => Shade::Overfit,
        Some("weak") => Shade::Weak,
        Some("success") => Shade::Success,
        Some(_) => return None,
    })
}

fn shaded_cell(text: &str, origin: &str) -> Result<(Cell, Shade), ReplayError> {
    let (cell, tag) = parse_cell(text).map_err(|m| invalid(origin, m))?;
    let shade = parse_shade(tag.as_deref()).ok_or_else(|| invalid(origin, format!("cell `{text}`: unknown shade")))?;
    Ok((cell, shade))
}

fn rep_consistent(shade: Shade, v: PublishedVerdict) -> bool {
    match (shade, v) {
        (Shade::Overfit, PublishedVerdict::Known(Verdict::Overfit)) => true,
        (Shade::Weak, PublishedVerdict::Known(Verdict::WeakOverfit) | PublishedVerdict::NeedsLoss) => true,
        (Shade::None, PublishedVerdict::NeedsLoss) => true,
        (Shade::None, PublishedVerdict::Known(v)) => !v.is_overfit(),
        _ => false,
    }
}

fn shade_name(s: Shade) -> &'static str {
    match s {
        Shade::None => "unshaded",
        Shade::Overfit => "overfit",
        Shade::Weak => "weak-overfit",
        Shade::Success => "success",
    }
}

/// First-round averages of a procedure fixture, keyed by (task, algorithm).
type RoundZero = BTreeMap<(String, String), (Cell, Cell)>;

fn replay_procedure(fx: ProcedureFixture, origin: &str, report: &mut ReplayReport) -> Result<RoundZero, ReplayError> {
    report.title = fx.title.clone();
    if fx.space_ladder.is_empty() {
        return Err(invalid(origin, "space_ladder is empty"));
    }
    let eps = fx.epsilon;
    let mut round_zero = RoundZero::new();
    for case in &fx.cases {
        let id = format!("{} {}", case.task, case.algorithm);
        let (grid, gshade) = shaded_cell(&case.grid, origin)?;
        if gshade != Shade::None {
            return Err(invalid(origin, format!("{id}: grid cell cannot be shaded")));
        }
        let mut state = ProcedureState::new(fx.budget_ladder.clone(), fx.space_ladder.len(), fx.space_ladder[0].clone())
            .map_err(|e| invalid(origin, e.to_string()))?;
        let mut actions: Vec<Action> = Vec::new();
        for (r, round) in case.rounds.iter().enumerate() {
            let rid = format!("{id} round {r}");
            match (r, &round.before, actions.last()) {
                (0, Some(_), _) => return Err(invalid(origin, format!("{rid}: the first round has no annotation"))),
                (0, None, _) => {}
                (_, None, _) => return Err(invalid(origin, format!("{rid}: missing `before` annotation"))),
                (_, Some(b), prev) => {
                    if parse_action(b).is_none() {
                        return Err(invalid(origin, format!("{rid}: unknown annotation `{b}`")));
                    }
                    let derived = prev.map_or("none", |a| a.annotation());
                    report.check(derived == b, MismatchKind::Action, format!("{rid} action"), b, derived);
                }
            }
            if state.outcome.is_some() {
                report.check(false, MismatchKind::Action, format!("{rid} action"), "another round", "terminal");
                break;
            }

            let mut reps = Vec::new();
            for (i, text) in round.reps.iter().enumerate() {
                let (cell, shade) = shaded_cell(text, origin)?;
                if shade == Shade::Success {
                    return Err(invalid(origin, format!("{rid} rep{}: runs cannot carry success shading", i + 1)));
                }
                let v = published_verdict(&cell, &grid, eps);
                report.check(
                    rep_consistent(shade, v),
                    MismatchKind::Shading,
                    format!("{rid} rep{}", i + 1),
                    shade_name(shade),
                    v,
                );
                reps.push((cell, shade, v));
            }
            if reps.is_empty() {
                return Err(invalid(origin, format!("{rid}: no repetitions")));
            }
            let (avg, avg_shade) = shaded_cell(&round.avg, origin)?;
            if avg_shade == Shade::Weak {
                return Err(invalid(origin, format!("{rid} avg: averages cannot be weak-overfit")));
            }
            let mval = mean(reps.iter().map(|(c, _, _)| c.val));
            let mtest = mean(reps.iter().map(|(c, _, _)| c.test));
            let close = (avg.val - mval).abs() <= AVERAGE_TOLERANCE + SLACK && (avg.test - mtest).abs() <= AVERAGE_TOLERANCE + SLACK;
            report.check(
                close,
                MismatchKind::Value,
                format!("{rid} avg"),
                format!("{:.1} {:.1}", avg.val, avg.test),
                format!("{mval:.2} {mtest:.2}"),
            );
            if r == 0 {
                round_zero.insert((case.task.clone(), case.algorithm.clone()), (grid, avg));
            }

            let published_kind = if reps.iter().any(|(_, s, _)| matches!(s, Shade::Overfit | Shade::Weak)) || avg_shade == Shade::Overfit {
                RoundKind::OverfitRound
            } else if avg_shade == Shade::Success {
                RoundKind::SuccessRound
            } else {
                RoundKind::UnderperformRound
            };
            let rep_overfit = reps.iter().any(|(_, s, v)| match v {
                PublishedVerdict::Known(v) => v.is_overfit(),
                PublishedVerdict::NeedsLoss => *s == Shade::Weak,
            });
            let avg_overfit = greater(mval, grid.val, eps) && mtest < grid.test - eps - SLACK;
            let score_kind = if rep_overfit || avg_overfit {
                RoundKind::OverfitRound
            } else if success_average(mval, mtest, &grid, eps) {
                RoundKind::SuccessRound
            } else {
                RoundKind::UnderperformRound
            };
            report.check(
                score_kind == published_kind,
                MismatchKind::Shading,
                format!("{rid} kind"),
                kind_name(published_kind),
                kind_name(score_kind),
            );

            let a = next_action(&state, published_kind).map_err(|e| invalid(origin, e.to_string()))?;
            state.apply(a, None);
            state.space_label = fx.space_ladder[state.space_rung].clone();
            actions.push(a);
        }
        let terminal = state.outcome.is_some();
        report.check(terminal, MismatchKind::Action, format!("{id} terminal"), "terminal after the last round", "not terminal");
        if let Some(summary) = state.summary_line() {
            report.check(summary == case.published, MismatchKind::Terminal, format!("{id} terminal"), &case.published, &summary);
        }
        let annotations: Vec<&str> = actions.iter().map(|a| a.annotation()).collect();
        report.lines.push(format!(
            "{:<6} {:<5} [{}] => {}",
            case.task,
            case.algorithm,
            annotations.join(", "),
            state.summary_line().unwrap_or_else(|| "(running)".into())
        ));
        report.actions.insert(id, actions);
    }
    report.pin_known(&fx.known);
    Ok(round_zero)
}

// ---------- mining ----------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MiningFixture {
    #[allow(dead_code)]
    kind: String,
    title: String,
    model: String,
    epochs: Option<u32>,
    #[serde(default = "default_theta")]
    theta: f64,
    #[serde(default = "default_delta")]
    delta: f64,
    grid_best: BTreeMap<String, toml::Table>,
    runs: Vec<MiningRun>,
    expect: MiningExpect,
    #[serde(default)]
    known: Vec<String>,
}

fn default_theta() -> f64 {
    MiningParams::default().theta
}

fn default_delta() -> f64 {
    MiningParams::default().delta
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MiningRun {
    task: String,
    label: String,
    config: toml::Table,
    #[serde(default)]
    marks: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MiningExpect {
    fixes: Vec<String>,
    #[serde(default)]
    lower: BTreeMap<String, usize>,
    #[serde(default)]
    excluded: BTreeMap<String, String>,
}

fn exclusion_name(r: ExclusionReason) -> &'static str {
    match r {
        ExclusionReason::Fixed => "fixed",
        ExclusionReason::GridHull => "grid-hull",
        ExclusionReason::GridOnBoundary => "grid-on-boundary",
        ExclusionReason::NoEvidence => "no-evidence",
    }
}

fn table_config(t: &toml::Table, origin: &str, what: &str) -> Result<TrialConfig, ReplayError> {
    let mut c = TrialConfig::new();
    for (k, v) in t {
        c = match v {
            toml::Value::Integer(i) => c.with(k, Scalar::Int(*i)),
            toml::Value::Float(f) => c.with(k, Scalar::Real(*f)),
            other => return Err(invalid(origin, format!("{what}.{k}: expected a number, found {other}"))),
        };
    }
    Ok(c)
}

fn replay_mining(fx: MiningFixture, origin: &str, report: &mut ReplayReport) -> Result<(), ReplayError> {
    report.title = fx.title.clone();
    let (grid, rules) = match fx.model.as_str() {
        "electra" => (presets::electra_grid(fx.epochs.unwrap_or(3)), presets::electra_rules()),
        "roberta" => (presets::roberta_grid(), presets::roberta_rules()),
        other => return Err(invalid(origin, format!("unknown model `{other}`"))),
    };
    let space = expand_grid_to_hpo(&grid, &rules).map_err(|e| invalid(origin, e.to_string()))?;
    let mut cases = Vec::new();
    for run in &fx.runs {
        let gb = fx
            .grid_best
            .get(&run.task)
            .ok_or_else(|| invalid(origin, format!("no grid_best for task `{}`", run.task)))?;
        let grid_best = table_config(gb, origin, &format!("grid_best.{}", run.task))?;
        let hpo_best = table_config(&run.config, origin, &format!("{} {}", run.task, run.label))?;
        for (name, mark) in &run.marks {
            let (Some(h), Some(g)) = (hpo_best.get_f64(name), grid_best.get_f64(name)) else {
                return Err(invalid(origin, format!("{} {}: mark on `{name}` without both values", run.task, run.label)));
            };
            let derived = if h > g {
                "higher"
            } else if h < g {
                "lower"
            } else {
                "equal"
            };
            report.check(derived == mark, MismatchKind::Shading, format!("{} {} {name}", run.task, run.label), mark, derived);
        }
        cases.push(MiningCase { hpo_best, grid_best });
    }
    let params = MiningParams {
        theta: fx.theta,
        delta: fx.delta,
    };
    let proposal = mine_fix_candidates(&cases, &space, &grid, &params);
    for e in &proposal.fixes {
        report.lines.push(format!(
            "fix     {:<18} -> {} (lower {}, higher {}, equal {} of {}; median |dev| {:.4})",
            e.name,
            e.grid_value,
            e.lower,
            e.higher,
            e.equal,
            e.runs(),
            e.median_abs_deviation
        ));
    }
    for e in &proposal.rejected {
        report.lines.push(format!(
            "reject  {:<18} (lower {}, higher {}, equal {} of {}; median |dev| {:.4})",
            e.name,
            e.lower,
            e.higher,
            e.equal,
            e.runs(),
            e.median_abs_deviation
        ));
    }
    for (name, reason) in &proposal.excluded {
        report.lines.push(format!("exclude {name:<18} ({})", exclusion_name(*reason)));
    }

    let got: Vec<String> = proposal.fixes.iter().map(|e| e.name.clone()).collect();
    let mut want = fx.expect.fixes.clone();
    want.sort();
    let mut got_sorted = got.clone();
    got_sorted.sort();
    report.check(
        got_sorted == want,
        MismatchKind::Mining,
        "fixes",
        format!("[{}]", want.join(", ")),
        format!("[{}]", got_sorted.join(", ")),
    );
    for (name, n) in &fx.expect.lower {
        let derived = proposal
            .fixes
            .iter()
            .chain(&proposal.rejected)
            .find(|e| &e.name == name)
            .map(|e| format!("{}/{}", e.lower, e.runs()));
        let derived = derived.unwrap_or_else(|| "no evidence".into());
        let expected = format!("{n}/{}", fx.runs.len());
        report.check(derived == expected, MismatchKind::Mining, format!("lower {name}"), expected, derived);
    }
    for (name, reason) in &fx.expect.excluded {
        let derived = proposal.excluded.get(name).map_or("not excluded", |r| exclusion_name(*r));
        report.check(derived == reason, MismatchKind::Mining, format!("excluded {name}"), reason, derived);
    }
    report.proposal = Some(proposal);
    report.pin_known(&fx.known);
    Ok(())
}

// ---------- runtimes ----------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuntimeFixture {
    #[allow(dead_code)]
    kind: String,
    title: String,
    prune_above_seconds: f64,
    max_run_seconds: f64,
    budget_ladder: Vec<f64>,
    tasks: Vec<RuntimeModel>,
    #[serde(default)]
    known: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuntimeModel {
    model: String,
    entries: Vec<RuntimeEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuntimeEntry {
    task: String,
    seconds: Option<f64>,
    epochs: Option<u32>,
    #[serde(default)]
    pruned: bool,
}

fn replay_runtimes(fx: RuntimeFixture, _origin: &str, report: &mut ReplayReport) -> Result<(), ReplayError> {
    report.title = fx.title.clone();
    let top = fx.budget_ladder.iter().copied().fold(0.0, f64::max);
    for m in &fx.tasks {
        for e in &m.entries {
            let id = format!("{} {}", m.model, e.task);
            let derived_pruned = e.seconds.is_none_or(|s| s > fx.prune_above_seconds);
            report.check(derived_pruned == e.pruned, MismatchKind::Pattern, format!("{id} pruned"), e.pruned, derived_pruned);
            match e.seconds {
                Some(s) if !derived_pruned => {
                    let budgets: Vec<String> = fx.budget_ladder.iter().map(|a| format!("{a}GST {:.0}s", a * s)).collect();
                    report.check(
                        top * s <= fx.max_run_seconds,
                        MismatchKind::Pattern,
                        format!("{id} budget"),
                        format!("<= {}s", fx.max_run_seconds),
                        format!("{:.0}s", top * s),
                    );
                    report.lines.push(format!(
                        "{id:<14} {s:>6.0}s {:>2} epochs -> {}",
                        e.epochs.map_or("-".into(), |x| x.to_string()),
                        budgets.join(", ")
                    ));
                }
                Some(s) => report.lines.push(format!("{id:<14} {s:>6.0}s pruned")),
                None => report.lines.push(format!("{id:<14}       - pruned")),
            }
        }
    }
    report.pin_known(&fx.known);
    Ok(())
}

// ---------- trial counts ----------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrialCountFixture {
    #[allow(dead_code)]
    kind: String,
    title: String,
    rs_range: [u32; 2],
    min_ratio: f64,
    rows: Vec<TrialCountRow>,
    #[serde(default)]
    known: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrialCountRow {
    task: String,
    rs: u32,
    asha: u32,
    bo_asha: u32,
}

fn replay_trial_counts(fx: TrialCountFixture, _origin: &str, report: &mut ReplayReport) -> Result<(), ReplayError> {
    report.title = fx.title.clone();
    let [lo, hi] = fx.rs_range;
    for r in &fx.rows {
        report.check(
            (lo..=hi).contains(&r.rs),
            MismatchKind::Pattern,
            format!("{} RS", r.task),
            format!("{lo}..={hi}"),
            r.rs,
        );
        for (name, n) in [("ASHA", r.asha), ("BO+ASHA", r.bo_asha)] {
            let ratio = n as f64 / r.rs as f64;
            report.check(
                ratio >= fx.min_ratio,
                MismatchKind::Pattern,
                format!("{} {name}", r.task),
                format!(">= {}x RS", fx.min_ratio),
                format!("{ratio:.2}x"),
            );
        }
        report.lines.push(format!(
            "{:<6} RS {:>2}  ASHA {:>2} ({:.1}x)  BO+ASHA {:>2} ({:.1}x)",
            r.task,
            r.rs,
            r.asha,
            r.asha as f64 / r.rs as f64,
            r.bo_asha,
            r.bo_asha as f64 / r.rs as f64
        ));
    }
    report.pin_known(&fx.known);
    Ok(())
}

// ---------- initial comparison ----------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialFixture {
    #[allow(dead_code)]
    kind: String,
    title: String,
    #[serde(default = "default_eps")]
    epsilon: f64,
    #[serde(default)]
    known: Vec<String>,
    models: Vec<InitialModel>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialModel {
    model: String,
    procedure: String,
    tasks: Vec<InitialRow>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialRow {
    task: String,
    grid: String,
    #[serde(rename = "RS")]
    rs: String,
    #[serde(rename = "ASHA")]
    asha: String,
    #[serde(rename = "BO_ASHA")]
    bo_asha: String,
    published: Option<String>,
}

fn same(a: &Cell, b: &Cell) -> bool {
    (a.val - b.val).abs() <= SLACK && (a.test - b.test).abs() <= SLACK
}

fn replay_initial(fx: InitialFixture, origin: &str, base: &Path, report: &mut ReplayReport) -> Result<(), ReplayError> {
    report.title = fx.title.clone();
    let eps = fx.epsilon;
    for m in &fx.models {
        let path = base.join(&m.procedure);
        let text = std::fs::read_to_string(&path).map_err(|source| ReplayError::Read { path: path.clone(), source })?;
        let value: toml::Value = toml::from_str(&text).map_err(|e| ReplayError::Parse {
            path: path.display().to_string(),
            key: ".".into(),
            message: e.to_string(),
        })?;
        let pfx: ProcedureFixture = deserialize(value, &path.display().to_string())?;
        let mut scratch = ReplayReport::default();
        let zero = replay_procedure(pfx, &path.display().to_string(), &mut scratch)?;
        let mut covered = BTreeSet::new();
        for row in &m.tasks {
            let (grid, _) = parse_cell(&row.grid).map_err(|e| invalid(origin, e))?;
            let (_, _) = parse_cell(&row.bo_asha).map_err(|e| invalid(origin, e))?;
            for (algo, text) in [("RS", &row.rs), ("ASHA", &row.asha)] {
                let (avg, _) = parse_cell(text).map_err(|e| invalid(origin, e))?;
                let id = format!("{} {} {algo}", m.model, row.task);
                match zero.get(&(row.task.clone(), algo.to_string())) {
                    Some((pgrid, pavg)) => {
                        covered.insert((row.task.clone(), algo.to_string()));
                        report.check(
                            same(&grid, pgrid),
                            MismatchKind::Value,
                            format!("{id} grid"),
                            format!("{:.1} {:.1}", pgrid.val, pgrid.test),
                            format!("{:.1} {:.1}", grid.val, grid.test),
                        );
                        report.check(
                            same(&avg, pavg),
                            MismatchKind::Value,
                            format!("{id} avg"),
                            format!("{:.1} {:.1}", pavg.val, pavg.test),
                            format!("{:.1} {:.1}", avg.val, avg.test),
                        );
                        report.lines.push(format!("{id:<18} {:.1} {:.1} = round 0 of {}", avg.val, avg.test, m.procedure));
                    }
                    None => {
                        let Some(published) = &row.published else {
                            return Err(invalid(origin, format!("{id}: not in {} and no published label", m.procedure)));
                        };
                        let derived = if success_average(avg.val, avg.test, &grid, eps) {
                            "succeeds w/ 1GST, S_full"
                        } else {
                            "not a first-round success"
                        };
                        report.check(derived == published, MismatchKind::Terminal, id.clone(), published, derived);
                        report.lines.push(format!("{id:<18} {:.1} {:.1} vs grid {:.1} {:.1} => {derived}", avg.val, avg.test, grid.val, grid.test));
                    }
                }
            }
        }
        for key in zero.keys() {
            if !covered.contains(key) {
                report.check(false, MismatchKind::Value, format!("{} {} {}", m.model, key.0, key.1), "a row in this table", "missing");
            }
        }
    }
    report.pin_known(&fx.known);
    Ok(())
}

// ---------- entry points ----------

pub fn replay_str(text: &str, origin: &str, base: &Path) -> Result<ReplayReport, ReplayError> {
    let value: toml::Value = toml::from_str(text).map_err(|e| ReplayError::Parse {
        path: origin.to_string(),
        key: ".".into(),
        message: e.to_string(),
    })?;
    let kind = value
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| invalid(origin, "missing string field `kind`"))?
        .to_string();
    let mut report = ReplayReport {
        fixture: origin.to_string(),
        ..Default::default()
    };
    match kind.as_str() {
        "verdicts" => replay_verdicts(deserialize(value, origin)?, origin, &mut report)?,
        "procedure" => {
            replay_procedure(deserialize(value, origin)?, origin, &mut report)?;
        }
        "mining" => replay_mining(deserialize(value, origin)?, origin, &mut report)?,
        "runtimes" => replay_runtimes(deserialize(value, origin)?, origin, &mut report)?,
        "trial-counts" => replay_trial_counts(deserialize(value, origin)?, origin, &mut report)?,
        "initial" => replay_initial(deserialize(value, origin)?, origin, base, &mut report)?,
        other => return Err(invalid(origin, format!("unknown fixture kind `{other}`"))),
    }
    Ok(report)
}

pub fn replay_file(path: &Path) -> Result<ReplayReport, ReplayError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReplayError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    replay_str(&text, &path.display().to_string(), base)
}
