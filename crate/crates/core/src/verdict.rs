//! Run and round classification against the grid baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Metrics are compared at one-decimal reporting granularity.
pub const DEFAULT_EPSILON: f64 = 0.05;
/// Absorbs binary rounding when a difference lands exactly on epsilon.
const EPS_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerdictError {
    #[error("non-finite score: {0}")]
    NonFinite(&'static str),
    #[error("tolerance must be finite and >= 0, got {0}")]
    InvalidTolerance(f64),
    #[error("a round needs at least one repetition")]
    EmptyRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub val_metric: f64,
    pub val_loss: f64,
    pub test_metric: f64,
}

impl RunScores {
    pub fn new(val_metric: f64, val_loss: f64, test_metric: f64) -> Self {
        Self {
            val_metric,
            val_loss,
            test_metric,
        }
    }

    fn check(&self) -> Result<(), VerdictError> {
        if !self.val_metric.is_finite() {
            return Err(VerdictError::NonFinite("val_metric"));
        }
        if !self.val_loss.is_finite() {
            return Err(VerdictError::NonFinite("val_loss"));
        }
        if !self.test_metric.is_finite() {
            return Err(VerdictError::NonFinite("test_metric"));
        }
        Ok(())
    }

    /// Component-wise mean.
    pub fn mean(reps: &[RunScores]) -> Option<RunScores> {
        if reps.is_empty() {
            return None;
        }
        let n = reps.len() as f64;
        Some(RunScores {
            val_metric: reps.iter().map(|r| r.val_metric).sum::<f64>() / n,
            val_loss: reps.iter().map(|r| r.val_loss).sum::<f64>() / n,
            test_metric: reps.iter().map(|r| r.test_metric).sum::<f64>() / n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Overfit,
    WeakOverfit,
    Underperform,
    SuccessCandidate,
}

impl Verdict {
    pub fn is_overfit(self) -> bool {
        matches!(self, Verdict::Overfit | Verdict::WeakOverfit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoundKind {
    OverfitRound,
    SuccessRound,
    UnderperformRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundVerdict {
    pub kind: RoundKind,
    pub reps: Vec<Verdict>,
    pub average: RunScores,
}

/// Three-way comparison with tolerance: `Greater` only when `a` exceeds `b` by more than `eps`.
fn cmp_eps(a: f64, b: f64, eps: f64) -> std::cmp::Ordering {
    let d = a - b;
    if d > eps + EPS_SLACK {
        std::cmp::Ordering::Greater
    } else if d < -(eps + EPS_SLACK) {
        std::cmp::Ordering::Less
    } else {
        std::cmp::Ordering::Equal
    }
}

fn check_eps(eps: f64) -> Result<(), VerdictError> {
    if eps.is_finite() && eps >= 0.0 {
        Ok(())
    } else {
        Err(VerdictError::InvalidTolerance(eps))
    }
}

pub fn classify_run(hpo: &RunScores, grid: &RunScores, eps: f64) -> Result<Verdict, VerdictError> {
    check_eps(eps)?;
    hpo.check()?;
    grid.check()?;
    let val = cmp_eps(hpo.val_metric, grid.val_metric, eps);
    let test_lower = cmp_eps(hpo.test_metric, grid.test_metric, eps).is_lt();
    Ok(match val {
        std::cmp::Ordering::Greater if test_lower => Verdict::Overfit,
        std::cmp::Ordering::Equal if test_lower && hpo.val_loss < grid.val_loss => {
            Verdict::WeakOverfit
        }
        std::cmp::Ordering::Less => Verdict::Underperform,
        _ => Verdict::SuccessCandidate,
    })
}

pub fn classify_round(
    reps: &[RunScores],
    grid: &RunScores,
    eps: f64,
) -> Result<RoundVerdict, VerdictError> {
    let average = RunScores::mean(reps).ok_or(VerdictError::EmptyRound)?;
    let verdicts = reps
        .iter()
        .map(|r| classify_run(r, grid, eps))
        .collect::<Result<Vec<_>, _>>()?;
    let avg_overfit = classify_run(&average, grid, eps)? == Verdict::Overfit;
    let kind = if avg_overfit || verdicts.iter().any(|v| v.is_overfit()) {
        RoundKind::OverfitRound
    } else if cmp_eps(average.val_metric, grid.val_metric, eps).is_gt()
        && cmp_eps(average.test_metric, grid.test_metric, eps).is_gt()
    {
        RoundKind::SuccessRound
    } else {
        RoundKind::UnderperformRound
    };
    Ok(RoundVerdict {
        kind,
        reps: verdicts,
        average,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: f64 = DEFAULT_EPSILON;

    fn s(val: f64, test: f64) -> RunScores {
        RunScores::new(val, 1.0, test)
    }

    #[test]
    fn walkthrough_examples() {
        let grid = RunScores::new(84.1, 0.9517, 76.8);
        assert_eq!(classify_run(&s(84.5, 74.6), &grid, E).unwrap(), Verdict::Overfit);
        assert_eq!(
            classify_run(&RunScores::new(84.1, 0.8233, 76.1), &grid, E).unwrap(),
            Verdict::WeakOverfit
        );
        assert_eq!(classify_run(&s(81.9, 76.1), &grid, E).unwrap(), Verdict::Underperform);
    }

    #[test]
    fn weak_overfit_needs_strictly_smaller_loss() {
        let grid = RunScores::new(84.1, 0.9517, 76.8);
        assert_eq!(
            classify_run(&RunScores::new(84.1, 0.9517, 76.1), &grid, E).unwrap(),
            Verdict::SuccessCandidate
        );
    }

    #[test]
    fn one_decimal_differences_count() {
        let grid = s(84.1, 76.8);
        assert_eq!(classify_run(&s(84.2, 76.7), &grid, E).unwrap(), Verdict::Overfit);
        assert_eq!(classify_run(&s(84.0, 76.7), &grid, E).unwrap(), Verdict::Underperform);
        assert_eq!(
            classify_run(&s(84.15, 76.8), &grid, E).unwrap(),
            Verdict::SuccessCandidate
        );
    }

    #[test]
    fn round_examples() {
        let wnli_grid = s(56.3, 65.1);
        let reps = [s(57.7, 65.3), s(57.7, 65.3), s(57.7, 65.3)];
        assert_eq!(
            classify_round(&reps, &wnli_grid, E).unwrap().kind,
            RoundKind::SuccessRound
        );

        let grid = RunScores::new(84.1, 0.9517, 76.8);
        let reps = [s(84.5, 74.6), s(80.0, 77.0), s(80.0, 77.0)];
        assert_eq!(
            classify_round(&reps, &grid, E).unwrap().kind,
            RoundKind::OverfitRound
        );

        let same = [grid, grid, grid];
        assert_eq!(
            classify_round(&same, &grid, E).unwrap().kind,
            RoundKind::UnderperformRound
        );
    }

    #[test]
    fn average_overfit_without_rep_overfit() {
        let grid = s(80.0, 80.0);
        // rep 1 beats on val only, rep 2 underperforms on val, average still overfits
        let reps = [s(82.0, 80.0), s(79.0, 79.0)];
        let v = classify_round(&reps, &grid, E).unwrap();
        assert!(v.reps.iter().all(|r| !r.is_overfit()));
        assert_eq!(v.kind, RoundKind::OverfitRound);
    }

    #[test]
    fn errors() {
        let grid = s(1.0, 1.0);
        assert!(classify_run(&s(f64::NAN, 1.0), &grid, E).is_err());
        assert!(classify_run(&s(1.0, 1.0), &grid, -1.0).is_err());
        assert_eq!(classify_round(&[], &grid, E), Err(VerdictError::EmptyRound));
    }
}
