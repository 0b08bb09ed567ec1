//! Asynchronous successive halving used as a stopping rule.
//!
//! Each report at a rung milestone is recorded in a [`RungLedger`]; the trial
//! continues only if it ranks within the top `ceil(n / eta)` of everything
//! recorded at that milestone so far.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TrialId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("invalid ASHA configuration: {0}")]
    InvalidConfig(String),
    #[error("trial {trial} already reported at milestone {step}")]
    DuplicateReport { trial: TrialId, step: u32 },
    #[error("report step must be positive")]
    ZeroStep,
    #[error("objective {0} is not finite")]
    NonFiniteObjective(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Continue,
    Stop,
}

/// Rung geometry, in checkpoint units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AshaConfig {
    pub grace_period: u32,
    pub reduction_factor: u32,
    pub max_t: u32,
}

impl AshaConfig {
    pub fn new(grace_period: u32, reduction_factor: u32, max_t: u32) -> Result<Self, SchedulerError> {
        let cfg = Self {
            grace_period,
            reduction_factor,
            max_t,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.grace_period == 0 || self.max_t == 0 {
            return Err(SchedulerError::InvalidConfig(
                "grace_period and max_t must be positive".into(),
            ));
        }
        if self.reduction_factor < 2 {
            return Err(SchedulerError::InvalidConfig(
                "reduction_factor must be at least 2".into(),
            ));
        }
        if self.grace_period > self.max_t {
            return Err(SchedulerError::InvalidConfig(format!(
                "grace_period {} exceeds max_t {}",
                self.grace_period, self.max_t
            )));
        }
        Ok(())
    }
}

/// `grace_period * eta^k` for every k that stays within `max_t`.
pub fn milestones(cfg: &AshaConfig) -> Vec<u32> {
    let mut out = Vec::new();
    let mut m = cfg.grace_period as u64;
    while m <= cfg.max_t as u64 {
        out.push(m as u32);
        m *= cfg.reduction_factor as u64;
    }
    out
}

/// Objectives recorded per milestone.
#[derive(Debug, Clone, Default)]
pub struct RungLedger {
    rungs: BTreeMap<u32, Vec<(f64, TrialId)>>,
    seen: BTreeSet<(u32, TrialId)>,
}

impl RungLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Recorded objectives at `step`, best first.
    pub fn recorded(&self, step: u32) -> &[(f64, TrialId)] {
        self.rungs.get(&step).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Records a report and decides whether the trial may continue.
    pub fn on_report(
        &mut self,
        cfg: &AshaConfig,
        trial: TrialId,
        step: u32,
        objective: f64,
    ) -> Result<Decision, SchedulerError> {
        if step == 0 {
            return Err(SchedulerError::ZeroStep);
        }
        if !objective.is_finite() {
            return Err(SchedulerError::NonFiniteObjective(objective));
        }
        let is_milestone = step >= cfg.grace_period
            && milestones(cfg).binary_search(&step).is_ok();
        if !is_milestone {
            return Ok(Decision::Continue);
        }
        if !self.seen.insert((step, trial)) {
            return Err(SchedulerError::DuplicateReport { trial, step });
        }
        let rung = self.rungs.entry(step).or_default();
        // descending; insert after equal values
        let pos = rung.partition_point(|(v, _)| *v >= objective);
        rung.insert(pos, (objective, trial));

        if step >= cfg.max_t {
            return Ok(Decision::Continue);
        }
        let n = rung.len();
        // ties rank in favor of the reporting trial
        let rank = rung.iter().filter(|(v, _)| *v > objective).count() + 1;
        let cutoff = n.div_ceil(cfg.reduction_factor as usize);
        Ok(if rank <= cutoff {
            Decision::Continue
        } else {
            Decision::Stop
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(g: u32, eta: u32, max_t: u32) -> AshaConfig {
        AshaConfig::new(g, eta, max_t).unwrap()
    }

    #[test]
    fn milestone_geometry() {
        assert_eq!(milestones(&cfg(1, 4, 16)), vec![1, 4, 16]);
        assert_eq!(milestones(&cfg(1, 4, 20)), vec![1, 4, 16]);
        assert_eq!(milestones(&cfg(2, 2, 8)), vec![2, 4, 8]);
    }

    #[test]
    fn invalid_configs() {
        assert!(AshaConfig::new(0, 4, 16).is_err());
        assert!(AshaConfig::new(1, 1, 16).is_err());
        assert!(AshaConfig::new(20, 4, 16).is_err());
    }

    #[test]
    fn first_reporter_continues() {
        let c = cfg(1, 4, 16);
        let mut ledger = RungLedger::new();
        assert_eq!(ledger.on_report(&c, 0, 1, 10.0).unwrap(), Decision::Continue);
    }

    fn seeded_ledger(c: &AshaConfig) -> RungLedger {
        let mut ledger = RungLedger::new();
        for (i, v) in [90.0, 80.0, 70.0, 60.0].into_iter().enumerate() {
            ledger.on_report(c, i as u64, 4, v).unwrap();
        }
        ledger
    }

    #[test]
    fn rank_within_top_fraction_continues() {
        let c = cfg(1, 4, 16);
        let mut ledger = seeded_ledger(&c);
        // rank 2 of 5, cutoff ceil(5/4) = 2
        assert_eq!(ledger.on_report(&c, 10, 4, 85.0).unwrap(), Decision::Continue);
        // rank 4 of 6 after the 85 report, cutoff 2
        assert_eq!(ledger.on_report(&c, 11, 4, 75.0).unwrap(), Decision::Stop);
    }

    #[test]
    fn low_report_against_original_ledger_stops() {
        let c = cfg(1, 4, 16);
        let mut ledger = seeded_ledger(&c);
        // rank 3 of 5, cutoff 2
        assert_eq!(ledger.on_report(&c, 10, 4, 75.0).unwrap(), Decision::Stop);
    }

    #[test]
    fn ties_continue() {
        let c = cfg(1, 2, 16);
        let mut ledger = RungLedger::new();
        ledger.on_report(&c, 0, 1, 5.0).unwrap();
        // n=2, cutoff 1, tie ranks first
        assert_eq!(ledger.on_report(&c, 1, 1, 5.0).unwrap(), Decision::Continue);
    }

    #[test]
    fn non_milestone_steps_continue_without_recording() {
        let c = cfg(1, 4, 16);
        let mut ledger = RungLedger::new();
        for step in [2, 3, 5, 15] {
            assert_eq!(ledger.on_report(&c, 0, step, -1e9).unwrap(), Decision::Continue);
            assert!(ledger.recorded(step).is_empty());
        }
    }

    #[test]
    fn max_t_always_continues() {
        let c = cfg(1, 4, 16);
        let mut ledger = RungLedger::new();
        for t in 0..5 {
            ledger.on_report(&c, t, 16, 100.0 + t as f64).unwrap();
        }
        assert_eq!(ledger.on_report(&c, 99, 16, 0.0).unwrap(), Decision::Continue);
        // beyond max_t nothing is a milestone
        assert_eq!(ledger.on_report(&c, 99, 30, 0.0).unwrap(), Decision::Continue);
    }

    #[test]
    fn duplicate_report_is_rejected() {
        let c = cfg(1, 4, 16);
        let mut ledger = RungLedger::new();
        ledger.on_report(&c, 3, 4, 1.0).unwrap();
        assert_eq!(
            ledger.on_report(&c, 3, 4, 2.0),
            Err(SchedulerError::DuplicateReport { trial: 3, step: 4 })
        );
    }
}
