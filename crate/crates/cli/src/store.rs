//! Append-only JSON-lines result log.
//!
//! Every line is one [`Envelope`]. Ids are assigned by the store and increase
//! by one per record; `run_summary`, `round` and `procedure_terminal` records
//! refer to earlier records by id.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use hpotriage_core::procedure::{Action, Outcome};
use hpotriage_core::verdict::{RoundKind, Verdict};
use hpotriage_core::{RunScores, TrialRecord};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
    #[error("schema violation in {kind} record: {message}")]
    Schema { kind: &'static str, message: String },
    #[error("{kind} record references unknown record id {id}")]
    Dangling { kind: &'static str, id: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub schema_version: u32,
    pub id: u64,
    pub experiment_id: String,
    pub recorded_at: String,
    #[serde(flatten)]
    pub record: Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Record {
    Trial(TrialPayload),
    RunSummary(RunSummary),
    Round(RoundPayload),
    ProcedureTerminal(TerminalPayload),
}

impl Record {
    pub fn kind(&self) -> &'static str {
        match self {
            Record::Trial(_) => "trial",
            Record::RunSummary(_) => "run_summary",
            Record::Round(_) => "round",
            Record::ProcedureTerminal(_) => "procedure_terminal",
        }
    }

    fn references(&self) -> Vec<u64> {
        match self {
            Record::Trial(_) => Vec::new(),
            Record::RunSummary(r) => r.trial_records.clone(),
            Record::Round(r) => r.run_summaries.clone(),
            Record::ProcedureTerminal(t) => t.rounds.clone(),
        }
    }

    fn check(&self) -> Result<(), StoreError> {
        let kind = self.kind();
        let schema = |message: String| Err(StoreError::Schema { kind, message });
        match self {
            Record::Trial(t) => {
                let steps = t.trial.reports.iter().map(|r| r.step);
                if let Some((a, b)) = steps.clone().zip(steps.skip(1)).find(|(a, b)| b <= a) {
                    return schema(format!(
                        "trial {} reports step {b} after step {a}",
                        t.trial.trial_id
                    ));
                }
                if t.trial.reports.iter().any(|r| r.step == 0) {
                    return schema("steps start at 1".into());
                }
            }
            Record::RunSummary(r) => {
                if r.trial_records.is_empty() {
                    return schema("a run summary needs at least one trial record".into());
                }
                if !(r.scores.val_metric.is_finite() && r.scores.val_loss.is_finite()) {
                    return schema("non-finite validation score".into());
                }
            }
            Record::Round(r) => {
                if r.run_summaries.is_empty() || r.run_summaries.len() != r.rep_verdicts.len() {
                    return schema(format!(
                        "{} run summaries for {} verdicts",
                        r.run_summaries.len(),
                        r.rep_verdicts.len()
                    ));
                }
            }
            Record::ProcedureTerminal(t) => {
                if t.rounds.is_empty() {
                    return schema("a terminal record needs at least one round".into());
                }
            }
        }
        Ok(())
    }
}

/// What produced a run: the grid baseline or one HPO repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rep_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_multiplier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPayload {
    pub run: RunKey,
    pub trial: TrialRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: RunKey,
    pub scores: ScoreRow,
    pub best_trial: u64,
    pub best_step: u32,
    pub trials_started: usize,
    pub trials_completed: usize,
    pub elapsed_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline_seconds: Option<f64>,
    pub trial_records: Vec<u64>,
}

/// Scores of one run; the test metric can be missing when an evaluator withheld it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub val_metric: f64,
    pub val_loss: f64,
    pub test_metric: Option<f64>,
}

impl From<RunScores> for ScoreRow {
    fn from(s: RunScores) -> Self {
        Self {
            val_metric: s.val_metric,
            val_loss: s.val_loss,
            test_metric: Some(s.test_metric),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPayload {
    pub algorithm: String,
    pub round: usize,
    pub space_label: String,
    pub budget_multiplier: f64,
    pub run_summaries: Vec<u64>,
    pub rep_verdicts: Vec<Verdict>,
    pub kind: RoundKind,
    pub average: RunScores,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalPayload {
    pub algorithm: String,
    pub outcome: Outcome,
    pub summary: String,
    pub rounds: Vec<u64>,
}

/// Single-writer handle; reopening continues the id sequence.
pub struct ResultStore {
    path: PathBuf,
    file: File,
    experiment_id: String,
    next_id: u64,
    known: BTreeSet<u64>,
}

impl ResultStore {
    pub fn open(path: &Path, experiment_id: &str) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        let existing = if path.exists() { read_all(path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            experiment_id: experiment_id.to_string(),
            next_id: existing.last().map_or(1, |e| e.id + 1),
            known: existing.iter().map(|e| e.id).collect(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn persist(&mut self, record: Record) -> Result<u64, StoreError> {
        record.check()?;
        if let Some(id) = record.references().into_iter().find(|id| !self.known.contains(id)) {
            return Err(StoreError::Dangling {
                kind: record.kind(),
                id,
            });
        }
        let envelope = Envelope {
            schema_version: SCHEMA_VERSION,
            id: self.next_id,
            experiment_id: self.experiment_id.clone(),
            recorded_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            record,
        };
        let mut line = serde_json::to_string(&envelope).expect("records always serialize");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|source| StoreError::Io {
                path: self.path.display().to_string(),
                source,
            })?;
        self.known.insert(envelope.id);
        self.next_id += 1;
        Ok(envelope.id)
    }
}

/// Reads and checks a whole store: versions, monotone ids, references and per-kind schemas.
pub fn read_all(path: &Path) -> Result<Vec<Envelope>, StoreError> {
    let file = File::open(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let corrupt = |line: usize, message: String| StoreError::Corrupt {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut out: Vec<Envelope> = Vec::new();
    let mut known = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let env: Envelope = serde_json::from_str(&line).map_err(|e| corrupt(i + 1, e.to_string()))?;
        if env.schema_version != SCHEMA_VERSION {
            return Err(corrupt(i + 1, format!("unsupported schema_version {}", env.schema_version)));
        }
        if out.last().is_some_and(|prev| env.id <= prev.id) {
            return Err(corrupt(i + 1, format!("id {} does not increase", env.id)));
        }
        env.record.check().map_err(|e| corrupt(i + 1, e.to_string()))?;
        if let Some(id) = env.record.references().into_iter().find(|id| !known.contains(id)) {
            return Err(corrupt(i + 1, format!("dangling reference to id {id}")));
        }
        known.insert(env.id);
        out.push(env);
    }
    Ok(out)
}
