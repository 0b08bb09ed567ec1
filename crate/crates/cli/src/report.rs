//! Aligned text tables over a result store: one block per round (or per
//! run group for plain `hpo` output) with a grid line, one row per
//! repetition and an average row.

use std::collections::BTreeMap;
use std::fmt::Write;

use hpotriage_core::verdict::{classify_round, RoundKind, RoundVerdict, Verdict, DEFAULT_EPSILON};
use hpotriage_core::RunScores;

use crate::store::{Envelope, Record, RunSummary, ScoreRow};

fn verdict_label(v: Verdict) -> &'static str {
    match v {
        Verdict::Overfit => "overfit",
        Verdict::WeakOverfit => "weak-overfit",
        Verdict::Underperform => "underperform",
        Verdict::SuccessCandidate => "success-candidate",
    }
}

fn kind_label(k: RoundKind) -> &'static str {
    match k {
        RoundKind::OverfitRound => "overfit-round",
        RoundKind::SuccessRound => "success-round",
        RoundKind::UnderperformRound => "underperform-round",
    }
}

fn test_cell(t: Option<f64>) -> String {
    t.map_or_else(|| "-".to_string(), |t| format!("{t:.2}"))
}

fn header(out: &mut String) {
    writeln!(
        out,
        "{:<10} {:>8} {:>8} {:>8} {:>7}  verdict",
        "", "val", "test", "loss", "trials"
    )
    .unwrap();
}

fn row(out: &mut String, label: &str, s: &ScoreRow, trials: Option<usize>, note: &str) {
    let trials = trials.map_or_else(|| "-".to_string(), |t| t.to_string());
    let line = format!(
        "{:<10} {:>8.2} {:>8} {:>8.4} {:>7}  {}",
        label,
        s.val_metric,
        test_cell(s.test_metric),
        s.val_loss,
        trials,
        note
    );
    writeln!(out, "{}", line.trim_end()).unwrap();
}

fn mean_row(runs: &[&RunSummary]) -> ScoreRow {
    let n = runs.len() as f64;
    let tests: Option<Vec<f64>> = runs.iter().map(|r| r.scores.test_metric).collect();
    ScoreRow {
        val_metric: runs.iter().map(|r| r.scores.val_metric).sum::<f64>() / n,
        val_loss: runs.iter().map(|r| r.scores.val_loss).sum::<f64>() / n,
        test_metric: tests.map(|t| t.iter().sum::<f64>() / n),
    }
}

fn complete(s: &ScoreRow) -> Option<RunScores> {
    s.test_metric.map(|t| RunScores::new(s.val_metric, s.val_loss, t))
}

/// Verdicts for a plain run group; `None` when some test metric is missing.
fn group_verdict(grid: &RunSummary, runs: &[&RunSummary]) -> Option<RoundVerdict> {
    let g = complete(&grid.scores)?;
    let reps: Option<Vec<RunScores>> = runs.iter().map(|r| complete(&r.scores)).collect();
    classify_round(&reps?, &g, DEFAULT_EPSILON).ok()
}

fn rep_label(r: &RunSummary, i: usize) -> String {
    match r.run.rep_seed {
        Some(seed) => format!("rep{} s{seed}", i + 1),
        None => format!("rep{}", i + 1),
    }
}

fn budget_tag(a: Option<f64>) -> String {
    a.map_or_else(|| "-".to_string(), |a| format!("{a}GST"))
}

/// Renders every experiment in the store; output depends only on the records.
pub fn render(envelopes: &[Envelope]) -> String {
    let mut by_experiment: BTreeMap<&str, Vec<&Envelope>> = BTreeMap::new();
    for e in envelopes {
        by_experiment.entry(&e.experiment_id).or_default().push(e);
    }
    let mut out = String::new();
    for (experiment, records) in by_experiment {
        writeln!(out, "experiment {experiment}").unwrap();
        let summaries: BTreeMap<u64, &RunSummary> = records
            .iter()
            .filter_map(|e| match &e.record {
                Record::RunSummary(s) => Some((e.id, s)),
                _ => None,
            })
            .collect();
        let grid = summaries.values().rev().find(|s| s.run.label == "grid").copied();
        let mut in_rounds = std::collections::BTreeSet::new();
        for e in &records {
            if let Record::Round(r) = &e.record {
                in_rounds.extend(r.run_summaries.iter().copied());
            }
        }

        for e in &records {
            match &e.record {
                Record::Round(r) => {
                    writeln!(
                        out,
                        "\n== {} round {}  {}  {}  -> {}",
                        r.algorithm,
                        r.round,
                        budget_tag(Some(r.budget_multiplier)),
                        r.space_label,
                        r.action.annotation()
                    )
                    .unwrap();
                    header(&mut out);
                    if let Some(g) = grid {
                        row(&mut out, "grid", &g.scores, Some(g.trials_started), "");
                    }
                    for (i, (id, v)) in r.run_summaries.iter().zip(&r.rep_verdicts).enumerate() {
                        let s = summaries[id];
                        row(&mut out, &rep_label(s, i), &s.scores, Some(s.trials_started), verdict_label(*v));
                    }
                    let avg = ScoreRow::from(r.average);
                    row(&mut out, "avg", &avg, None, kind_label(r.kind));
                }
                Record::ProcedureTerminal(t) => {
                    writeln!(out, "\n== {} terminal: {} ({})", t.algorithm, t.summary, t.outcome).unwrap();
                }
                _ => {}
            }
        }

        // runs outside any round, grouped by algorithm, budget and space
        let mut groups: BTreeMap<(String, String, String), Vec<&RunSummary>> = BTreeMap::new();
        for (id, s) in &summaries {
            if s.run.label == "grid" || in_rounds.contains(id) {
                continue;
            }
            groups
                .entry((
                    s.run.label.clone(),
                    budget_tag(s.run.budget_multiplier),
                    s.run.space_label.clone().unwrap_or_else(|| "-".into()),
                ))
                .or_default()
                .push(s);
        }
        if groups.is_empty() && in_rounds.is_empty() {
            if let Some(g) = grid {
                writeln!(out, "\n== grid").unwrap();
                header(&mut out);
                row(&mut out, "grid", &g.scores, Some(g.trials_started), "");
            }
        }
        for ((label, budget, space), runs) in groups {
            writeln!(out, "\n== {label}  {budget}  {space}").unwrap();
            header(&mut out);
            let verdict = grid.and_then(|g| group_verdict(g, &runs));
            if let Some(g) = grid {
                row(&mut out, "grid", &g.scores, Some(g.trials_started), "");
            }
            for (i, s) in runs.iter().enumerate() {
                let note = verdict.as_ref().map_or("", |v| verdict_label(v.reps[i]));
                row(&mut out, &rep_label(s, i), &s.scores, Some(s.trials_started), note);
            }
            let note = verdict.as_ref().map_or("", |v| kind_label(v.kind));
            row(&mut out, "avg", &mean_row(&runs), None, note);
        }
        out.push('\n');
    }
    out
}
