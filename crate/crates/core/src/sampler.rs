//! Configuration proposal: uniform random sampling and a TPE sampler.
//!
//! The TPE sampler splits the observation history into a "good" and a "bad"
//! group, fits independent per-dimension density models to both and returns
//! the candidate (drawn from the good model) maximizing the product of the
//! per-dimension density ratios.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::space::{Domain, Scalar, SearchSpace, TrialConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("cannot sample from an empty search space")]
    EmptySpace,
    #[error("objective {0} is not finite")]
    NonFiniteObjective(f64),
    #[error("invalid TPE parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpeParams {
    /// Fraction of the history treated as "good".
    pub gamma: f64,
    /// Completed observations required before the density models are used.
    pub n_startup: usize,
    /// Candidates drawn from the good model per suggestion.
    pub n_candidates: usize,
}

impl Default for TpeParams {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            n_startup: 5,
            n_candidates: 24,
        }
    }
}

impl TpeParams {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(SamplerError::InvalidParams(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if self.n_startup == 0 || self.n_candidates == 0 {
            return Err(SamplerError::InvalidParams(
                "n_startup and n_candidates must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationStatus {
    Completed,
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub config: TrialConfig,
    pub objective: f64,
    pub status: ObservationStatus,
}

/// Finished trials the sampler conditions on. Larger objectives are better.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationHistory {
    entries: Vec<Observation>,
}

impl ObservationHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        config: TrialConfig,
        objective: f64,
        status: ObservationStatus,
    ) -> Result<(), SamplerError> {
        if !objective.is_finite() {
            return Err(SamplerError::NonFiniteObjective(objective));
        }
        self.entries.push(Observation {
            config,
            objective,
            status,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn completed(&self) -> usize {
        self.entries
            .iter()
            .filter(|o| o.status == ObservationStatus::Completed)
            .count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.entries.iter()
    }

    /// Splits into (good, bad). Pruned observations always land in the bad group.
    pub fn split(&self, gamma: f64) -> (Vec<&Observation>, Vec<&Observation>) {
        let mut completed: Vec<&Observation> = self
            .entries
            .iter()
            .filter(|o| o.status == ObservationStatus::Completed)
            .collect();
        // stable: equal objectives keep insertion order
        completed.sort_by(|a, b| b.objective.total_cmp(&a.objective));
        let n_good = ((gamma * self.entries.len() as f64).ceil() as usize)
            .max(1)
            .min(completed.len());
        let bad_completed = completed.split_off(n_good);
        let mut bad = bad_completed;
        bad.extend(
            self.entries
                .iter()
                .filter(|o| o.status == ObservationStatus::Pruned),
        );
        (completed, bad)
    }
}

fn log_uniform(lo: f64, hi: f64, u: f64) -> f64 {
    (lo.ln() + u * (hi.ln() - lo.ln())).exp().clamp(lo, hi)
}

fn sample_domain<R: Rng + ?Sized>(domain: &Domain, rng: &mut R) -> Scalar {
    match domain {
        Domain::Uniform { lo, hi } => {
            let u: f64 = rng.random();
            Scalar::Real((lo + u * (hi - lo)).clamp(*lo, *hi))
        }
        Domain::LogUniform { lo, hi } => Scalar::Real(log_uniform(*lo, *hi, rng.random())),
        Domain::Categorical { values } => values[rng.random_range(0..values.len())].clone(),
        Domain::Fixed { value } => value.clone(),
    }
}

/// Draws every hyperparameter independently from its domain.
pub fn random_sample<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> TrialConfig {
    space
        .entries()
        .iter()
        .map(|(name, domain)| (name.clone(), sample_domain(domain, rng)))
        .collect()
}

/// Truncated Gaussian mixture plus a uniform prior, in a continuous coordinate.
#[derive(Debug, Clone)]
pub(crate) struct ParzenEstimator {
    lo: f64,
    hi: f64,
    centers: Vec<f64>,
    bandwidth: f64,
    /// Normalizer of each kernel over [lo, hi].
    masses: Vec<f64>,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

impl ParzenEstimator {
    pub(crate) fn fit(points: &[f64], lo: f64, hi: f64) -> Self {
        let width = hi - lo;
        let n = points.len();
        // 1% of the width once there are 99+ points, wider before
        let floor = width / (n as f64 + 1.0).min(100.0);
        let bandwidth = if n == 0 {
            width
        } else {
            let mean = points.iter().sum::<f64>() / n as f64;
            let var = points.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            (1.06 * var.sqrt() * (n as f64).powf(-0.2)).max(floor)
        };
        let masses = points
            .iter()
            .map(|&c| {
                let m = std_normal_cdf((hi - c) / bandwidth) - std_normal_cdf((lo - c) / bandwidth);
                m.max(f64::MIN_POSITIVE)
            })
            .collect();
        Self {
            lo,
            hi,
            centers: points.to_vec(),
            bandwidth,
            masses,
        }
    }

    fn weight(&self) -> f64 {
        1.0 / (self.centers.len() as f64 + 1.0)
    }

    pub(crate) fn pdf(&self, x: f64) -> f64 {
        let w = self.weight();
        let prior = w / (self.hi - self.lo);
        let norm = 1.0 / (self.bandwidth * (2.0 * std::f64::consts::PI).sqrt());
        let kernels: f64 = self
            .centers
            .iter()
            .zip(&self.masses)
            .map(|(&c, &m)| {
                let z = (x - c) / self.bandwidth;
                norm * (-0.5 * z * z).exp() / m
            })
            .sum();
        prior + w * kernels
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = rng.random_range(0..=self.centers.len());
        if k == self.centers.len() {
            let u: f64 = rng.random();
            return (self.lo + u * (self.hi - self.lo)).clamp(self.lo, self.hi);
        }
        let normal = Normal::new(self.centers[k], self.bandwidth).expect("positive bandwidth");
        for _ in 0..64 {
            let x = normal.sample(rng);
            if x >= self.lo && x <= self.hi {
                return x;
            }
        }
        self.centers[k].clamp(self.lo, self.hi)
    }
}

/// Add-one smoothed frequency weights over categorical values.
pub fn categorical_weights(values: &[Scalar], observed: &[&Scalar]) -> Vec<f64> {
    let total = observed.len() as f64 + values.len() as f64;
    values
        .iter()
        .map(|v| {
            let count = observed.iter().filter(|o| o.matches(v, 0.0)).count() as f64;
            (count + 1.0) / total
        })
        .collect()
}

enum DimModel {
    Continuous {
        log: bool,
        good: ParzenEstimator,
        bad: ParzenEstimator,
    },
    Categorical {
        values: Vec<Scalar>,
        good: Vec<f64>,
        bad: Vec<f64>,
    },
    Fixed(Scalar),
}

impl DimModel {
    fn fit(name: &str, domain: &Domain, good: &[&Observation], bad: &[&Observation]) -> Self {
        let coords = |group: &[&Observation], log: bool| -> Vec<f64> {
            group
                .iter()
                .filter_map(|o| o.config.get(name))
                .filter(|v| domain.contains(v))
                .filter_map(Scalar::as_f64)
                .map(|v| if log { v.ln() } else { v })
                .collect()
        };
        match domain {
            Domain::Uniform { lo, hi } | Domain::LogUniform { lo, hi } => {
                let log = matches!(domain, Domain::LogUniform { .. });
                let (a, b) = if log { (lo.ln(), hi.ln()) } else { (*lo, *hi) };
                DimModel::Continuous {
                    log,
                    good: ParzenEstimator::fit(&coords(good, log), a, b),
                    bad: ParzenEstimator::fit(&coords(bad, log), a, b),
                }
            }
            Domain::Categorical { values } => {
                let observed = |group: &[&Observation]| -> Vec<Scalar> {
                    group
                        .iter()
                        .filter_map(|o| o.config.get(name).cloned())
                        .collect()
                };
                let g = observed(good);
                let b = observed(bad);
                DimModel::Categorical {
                    values: values.clone(),
                    good: categorical_weights(values, &g.iter().collect::<Vec<_>>()),
                    bad: categorical_weights(values, &b.iter().collect::<Vec<_>>()),
                }
            }
            Domain::Fixed { value } => DimModel::Fixed(value.clone()),
        }
    }

    /// Draws from the good model; returns the value and its log density ratio.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (Scalar, f64) {
        match self {
            DimModel::Continuous { log, good, bad } => {
                let x = good.sample(rng);
                let ratio = good.pdf(x).ln() - bad.pdf(x).ln();
                let value = if *log {
                    x.exp().clamp(good.lo.exp(), good.hi.exp())
                } else {
                    x
                };
                (Scalar::Real(value), ratio)
            }
            DimModel::Categorical { values, good, bad } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut idx = values.len() - 1;
                for (i, w) in good.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                (values[idx].clone(), good[idx].ln() - bad[idx].ln())
            }
            DimModel::Fixed(v) => (v.clone(), 0.0),
        }
    }
}

/// Suggests the next configuration given the history of finished trials.
pub fn tpe_suggest<R: Rng + ?Sized>(
    history: &ObservationHistory,
    space: &SearchSpace,
    params: &TpeParams,
    rng: &mut R,
) -> Result<TrialConfig, SamplerError> {
    params.validate()?;
    if space.is_empty() {
        return Err(SamplerError::EmptySpace);
    }
    if history.len() < params.n_startup {
        return Ok(random_sample(space, rng));
    }
    let (good, bad) = history.split(params.gamma);
    let models: Vec<(&String, DimModel)> = space
        .entries()
        .iter()
        .map(|(name, domain)| (name, DimModel::fit(name, domain, &good, &bad)))
        .collect();

    let mut best: Option<(f64, TrialConfig)> = None;
    for _ in 0..params.n_candidates {
        let mut score = 0.0;
        let mut config = TrialConfig::new();
        for (name, model) in &models {
            let (value, ratio) = model.draw(rng);
            score += ratio;
            config.assignments.insert((*name).clone(), value);
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, config));
        }
    }
    Ok(best.expect("n_candidates >= 1").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::contains;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn space_of(entries: Vec<(&str, Domain)>) -> SearchSpace {
        SearchSpace::new(
            "t",
            entries
                .into_iter()
                .map(|(n, d)| (n.to_string(), d))
                .collect::<BTreeMap<_, _>>(),
        )
        .unwrap()
    }

    fn lr_space() -> SearchSpace {
        space_of(vec![(
            "learning_rate",
            Domain::LogUniform {
                lo: 2.99e-5,
                hi: 1.51e-4,
            },
        )])
    }

    #[test]
    fn all_fixed_space_yields_unique_config() {
        let space = space_of(vec![
            ("a", Domain::Fixed { value: Scalar::Real(0.1) }),
            ("b", Domain::Fixed { value: Scalar::Int(32) }),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let c = random_sample(&space, &mut rng);
            assert_eq!(c, TrialConfig::new().with("a", 0.1).with("b", 32i64));
        }
    }

    #[test]
    fn uniform_samples_stay_in_bounds() {
        let space = space_of(vec![("w", Domain::Uniform { lo: 0.0, hi: 0.2 })]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let v = random_sample(&space, &mut rng).get_f64("w").unwrap();
            assert!((0.0..=0.2).contains(&v));
        }
    }

    #[test]
    fn log_uniform_median_near_geometric_mean() {
        let space = space_of(vec![("lr", Domain::LogUniform { lo: 1e-5, hi: 1e-1 })]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut xs: Vec<f64> = (0..10_000)
            .map(|_| random_sample(&space, &mut rng).get_f64("lr").unwrap())
            .collect();
        xs.sort_by(f64::total_cmp);
        let median = 0.5 * (xs[4999] + xs[5000]);
        assert!((6e-4..=1.7e-3).contains(&median), "median {median}");
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let mut h = ObservationHistory::new();
        assert_eq!(
            h.push(TrialConfig::new(), f64::NAN, ObservationStatus::Completed)
                .unwrap_err()
                .to_string(),
            "objective NaN is not finite"
        );
        assert!(h.is_empty());
    }

    #[test]
    fn empty_space_is_an_error() {
        let space = space_of(vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            tpe_suggest(&ObservationHistory::new(), &space, &TpeParams::default(), &mut rng),
            Err(SamplerError::EmptySpace)
        );
    }

    #[test]
    fn startup_phase_is_random_sampling() {
        let space = lr_space();
        let params = TpeParams::default();
        let mut h = ObservationHistory::new();
        for i in 0..params.n_startup - 1 {
            let c = TrialConfig::new().with("learning_rate", 5e-5 + 1e-5 * i as f64);
            h.push(c, i as f64, ObservationStatus::Completed).unwrap();
        }
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            assert_eq!(
                tpe_suggest(&h, &space, &params, &mut a).unwrap(),
                random_sample(&space, &mut b)
            );
        }
        // a pruned entry completes the startup phase
        h.push(
            TrialConfig::new().with("learning_rate", 1e-4),
            9.0,
            ObservationStatus::Pruned,
        )
        .unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let differs = (0..50).any(|_| {
            tpe_suggest(&h, &space, &params, &mut a).unwrap() != random_sample(&space, &mut b)
        });
        assert!(differs);
    }

    #[test]
    fn split_puts_pruned_in_bad_group() {
        let mut h = ObservationHistory::new();
        for (v, s) in [
            (1.0, ObservationStatus::Completed),
            (10.0, ObservationStatus::Pruned),
            (3.0, ObservationStatus::Completed),
            (2.0, ObservationStatus::Completed),
        ] {
            h.push(TrialConfig::new(), v, s).unwrap();
        }
        let (good, bad) = h.split(0.25);
        assert_eq!(good.len(), 1);
        assert_eq!(good[0].objective, 3.0);
        let mut bad_objs: Vec<f64> = bad.iter().map(|o| o.objective).collect();
        bad_objs.sort_by(f64::total_cmp);
        assert_eq!(bad_objs, vec![1.0, 2.0, 10.0]);
    }

    #[test]
    fn categorical_good_weight_dominates_for_observed_value() {
        // 8 observations, gamma 0.25 -> 2 good ones, both with batch 16
        let values = vec![Scalar::Int(16), Scalar::Int(32), Scalar::Int(64)];
        let good = [Scalar::Int(16), Scalar::Int(16)];
        let refs: Vec<&Scalar> = good.iter().collect();
        let w = categorical_weights(&values, &refs);
        // (2+1)/(2+3) and (0+1)/(2+3)
        assert!((w[0] - 0.6).abs() < 1e-15);
        assert!((w[1] - 0.2).abs() < 1e-15);
        assert!(w[0] > w[1]);
    }

    #[test]
    fn parzen_density_integrates_to_one() {
        let est = ParzenEstimator::fit(&[0.05, 0.1, 0.19], 0.0, 0.2);
        let n = 20_000;
        let h = 0.2 / n as f64;
        let integral: f64 = (0..n).map(|i| est.pdf((i as f64 + 0.5) * h) * h).sum();
        assert!((integral - 1.0).abs() < 1e-4, "{integral}");
    }

    #[test]
    fn suggestions_are_deterministic_and_members() {
        let space = space_of(vec![
            ("lr", Domain::LogUniform { lo: 1e-5, hi: 1e-3 }),
            ("w", Domain::Uniform { lo: 0.0, hi: 0.2 }),
            (
                "bs",
                Domain::Categorical {
                    values: vec![Scalar::Int(16), Scalar::Int(32), Scalar::Int(64)],
                },
            ),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut h = ObservationHistory::new();
        for i in 0..12 {
            let c = random_sample(&space, &mut rng);
            h.push(c, i as f64 * 0.5, ObservationStatus::Completed)
                .unwrap();
        }
        let params = TpeParams::default();
        for seed in 0..20 {
            let a = tpe_suggest(&h, &space, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = tpe_suggest(&h, &space, &params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
            assert!(contains(&space, &a).unwrap());
        }
    }
}
