//! Synthetic fine-tuning tasks.
//!
//! A surrogate task is a quadratic response surface scaled by a saturating
//! learning curve, with separate validation and test surfaces whose optima can
//! be displaced from each other and whose noise components are correlated at a
//! chosen level. Everything is a pure function of `(spec, config, step)`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{
    EvalError, Evaluator, FinalReport, Report, TaskSize, TrialPlan, TrialRecord, TrialStart,
};
use crate::space::{Scalar, TrialConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("invalid surrogate spec: {0}")]
    InvalidSpec(String),
    #[error("unknown surrogate preset `{0}`")]
    UnknownPreset(String),
    #[error("correlation needs two equally long samples of length >= 2 (got {0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation is undefined for a zero-variance sample")]
    UndefinedCorrelation,
    #[error("need at least {needed} completed trials, got {got}")]
    InsufficientTrials { needed: usize, got: usize },
    #[error("tuner failed: {0}")]
    Tuner(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

/// One quadratic term of the validation surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceDim {
    pub optimum: f64,
    pub curvature: f64,
    #[serde(default)]
    pub scale: Scale,
}

/// Saturating learning curve: the fraction of the surface reached after `step` checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveShape {
    /// Fraction reached before training.
    pub initial_fraction: f64,
    /// Share of the remaining gap closed per epoch.
    pub per_epoch_gain: f64,
    pub checkpoints_per_epoch: u32,
}

impl CurveShape {
    pub fn fraction(&self, step: u32) -> f64 {
        let epochs = step as f64 / self.checkpoints_per_epoch as f64;
        1.0 - (1.0 - self.initial_fraction) * (1.0 - self.per_epoch_gain).powf(epochs)
    }
}

/// Per-checkpoint cost: `base_seconds` plus an optional extra per batch-size value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub base_seconds: f64,
    #[serde(default = "default_batch_param")]
    pub batch_param: String,
    #[serde(default)]
    pub batch_seconds: BTreeMap<String, f64>,
}

fn default_batch_param() -> String {
    "batch_size".to_string()
}

impl CostModel {
    pub fn per_checkpoint(&self, config: &TrialConfig) -> f64 {
        let extra = config
            .get(&self.batch_param)
            .and_then(|v| {
                let key = match v {
                    Scalar::Int(i) => i.to_string(),
                    Scalar::Real(r) => r.to_string(),
                    Scalar::Text(t) => t.clone(),
                };
                self.batch_seconds.get(&key).copied()
            })
            .unwrap_or(0.0);
        self.base_seconds + extra
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSpec {
    pub seed: u64,
    /// Metric value at the optimum of a fully trained model.
    pub peak: f64,
    pub dims: BTreeMap<String, SurfaceDim>,
    /// Displacement of the test optimum from the validation optimum, per dimension.
    #[serde(default)]
    pub test_shift: BTreeMap<String, f64>,
    pub noise_sd: f64,
    /// Correlation between validation and test noise.
    pub rho: f64,
    pub curve: CurveShape,
    pub cost: CostModel,
}

/// Affine map from metric (percent) to a positive loss; larger metric, smaller loss.
pub fn loss_from_metric(metric: f64) -> f64 {
    (200.0 - metric) / 100.0
}

impl SurrogateSpec {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |m: &str| Err(SurrogateError::InvalidSpec(m.to_string()));
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be finite and >= 0");
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [-1, 1]");
        }
        if !(self.cost.base_seconds > 0.0 && self.cost.base_seconds.is_finite()) {
            return bad("cost.base_seconds must be positive");
        }
        if self.cost.batch_seconds.values().any(|v| v.is_nan() || *v < 0.0) {
            return bad("cost.batch_seconds entries must be >= 0");
        }
        if self.curve.checkpoints_per_epoch == 0 {
            return bad("curve.checkpoints_per_epoch must be positive");
        }
        if !(0.0..=1.0).contains(&self.curve.initial_fraction)
            || !(0.0..=1.0).contains(&self.curve.per_epoch_gain)
        {
            return bad("curve fractions must lie in [0, 1]");
        }
        for (name, d) in &self.dims {
            if d.curvature.is_nan() || d.curvature < 0.0 || !d.optimum.is_finite() {
                return Err(SurrogateError::InvalidSpec(format!(
                    "dimension `{name}` needs a finite optimum and curvature >= 0"
                )));
            }
            if d.scale == Scale::Log && d.optimum <= 0.0 {
                return Err(SurrogateError::InvalidSpec(format!(
                    "log-scale dimension `{name}` needs a positive optimum"
                )));
            }
        }
        if let Some(name) = self.test_shift.keys().find(|k| !self.dims.contains_key(*k)) {
            return Err(SurrogateError::InvalidSpec(format!(
                "test_shift names unknown dimension `{name}`"
            )));
        }
        Ok(())
    }

    fn surface(&self, config: &TrialConfig, shifted: bool) -> f64 {
        let penalty: f64 = self
            .dims
            .iter()
            .filter_map(|(name, d)| {
                let v = config.get_f64(name)?;
                let shift = if shifted {
                    self.test_shift.get(name).copied().unwrap_or(0.0)
                } else {
                    0.0
                };
                let delta = match d.scale {
                    Scale::Linear => v - (d.optimum + shift),
                    Scale::Log => v.max(f64::MIN_POSITIVE).ln() - (d.optimum.ln() + shift),
                };
                Some(d.curvature * delta * delta)
            })
            .sum();
        (self.peak - penalty).max(0.0)
    }

    /// Fully trained, noise-free validation surface.
    pub fn surface_val(&self, config: &TrialConfig) -> f64 {
        self.surface(config, false)
    }

    /// Fully trained, noise-free test surface.
    pub fn surface_test(&self, config: &TrialConfig) -> f64 {
        self.surface(config, true)
    }

    /// The validation and test noise draws for `(config, step)`.
    fn noise(&self, config: &TrialConfig, step: u32) -> (f64, f64) {
        if self.noise_sd == 0.0 {
            return (0.0, 0.0);
        }
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(step.to_le_bytes());
        for (name, value) in &config.assignments {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            match value {
                Scalar::Int(i) => hasher.update((*i as f64).to_bits().to_le_bytes()),
                Scalar::Real(r) => hasher.update(r.to_bits().to_le_bytes()),
                Scalar::Text(t) => hasher.update(t.as_bytes()),
            }
            hasher.update([0xff]);
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let shared: f64 = StandardNormal.sample(&mut rng);
        let independent: f64 = StandardNormal.sample(&mut rng);
        let val = self.noise_sd * shared;
        let test =
            self.noise_sd * (self.rho * shared + (1.0 - self.rho * self.rho).sqrt() * independent);
        (val, test)
    }

    /// Spec with identical validation and test surfaces and fully shared noise.
    pub fn aligned_copy(&self) -> SurrogateSpec {
        SurrogateSpec {
            test_shift: BTreeMap::new(),
            rho: 1.0,
            ..self.clone()
        }
    }
}

/// Validation metric, loss and checkpoint cost at `step` (1-based).
pub fn evaluate(spec: &SurrogateSpec, config: &TrialConfig, step: u32) -> (f64, f64, f64) {
    let (noise, _) = spec.noise(config, step);
    let metric = spec.curve.fraction(step) * spec.surface_val(config) + noise;
    (metric, loss_from_metric(metric), spec.cost.per_checkpoint(config))
}

/// Test metric of the model trained with `config` at checkpoint `step`.
pub fn test_at(spec: &SurrogateSpec, config: &TrialConfig, step: u32) -> f64 {
    let (_, noise) = spec.noise(config, step);
    spec.curve.fraction(step) * spec.surface_test(config) + noise
}

/// Named surrogate specs.
pub mod presets {
    use super::*;

    pub const NAMES: [&str; 5] = [
        "aligned",
        "planted-overfit",
        "noisy-neutral",
        "planted-quadratic",
        "divergent",
    ];

    fn dim(optimum: f64, curvature: f64, scale: Scale) -> SurfaceDim {
        SurfaceDim {
            optimum,
            curvature,
            scale,
        }
    }

    /// Electra-like surface; optima given per dimension.
    fn base(seed: u64, lr_opt: f64, warmup_opt: f64, warmup_curv: f64) -> SurrogateSpec {
        let mut dims = BTreeMap::new();
        dims.insert("learning_rate".into(), dim(lr_opt, 2.0, Scale::Log));
        dims.insert("warmup_ratio".into(), dim(warmup_opt, warmup_curv, Scale::Linear));
        dims.insert("attention_dropout".into(), dim(0.1, 100.0, Scale::Linear));
        dims.insert("hidden_dropout".into(), dim(0.1, 100.0, Scale::Linear));
        dims.insert("weight_decay".into(), dim(0.0, 10.0, Scale::Linear));
        dims.insert("batch_size".into(), dim(32.0, 0.002, Scale::Linear));
        SurrogateSpec {
            seed,
            peak: 85.0,
            dims,
            test_shift: BTreeMap::new(),
            noise_sd: 0.0,
            rho: 1.0,
            curve: CurveShape {
                initial_fraction: 0.5,
                per_epoch_gain: 0.6,
                checkpoints_per_epoch: 5,
            },
            cost: CostModel {
                base_seconds: 10.0,
                batch_param: default_batch_param(),
                batch_seconds: BTreeMap::new(),
            },
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<SurrogateSpec, SurrogateError> {
        let spec = match name {
            // test surface identical to validation, noise free, optimum off-grid
            "aligned" => base(seed, 6e-5, 0.1, 200.0),
            // validation prefers almost no warmup, test prefers the grid value
            "planted-overfit" => {
                let mut s = base(seed, 6e-5, 0.01, 1000.0);
                s.test_shift.insert("warmup_ratio".into(), 0.09);
                s.noise_sd = 0.02;
                s.rho = 0.0;
                s
            }
            "noisy-neutral" => {
                let mut s = base(seed, 1e-4, 0.1, 200.0);
                s.noise_sd = 0.5;
                s.rho = 0.0;
                s
            }
            // every optimum strictly inside the HPO domains
            "planted-quadratic" => {
                let mut s = base(seed, 6e-5, 0.05, 400.0);
                for (name, opt) in [
                    ("attention_dropout", 0.05),
                    ("hidden_dropout", 0.15),
                    ("weight_decay", 0.1),
                ] {
                    s.dims.get_mut(name).expect("base dim").optimum = opt;
                }
                s.dims.get_mut("weight_decay").expect("base dim").curvature = 50.0;
                s
            }
            "divergent" => {
                // validation optimum on the lower edge of every continuous range,
                // test optimum on the upper edge
                let mut s = base(seed, 2.99e-5, 0.0, 200.0);
                for (name, shift) in [
                    ("learning_rate", (1.51e-4f64 / 2.99e-5).ln()),
                    ("warmup_ratio", 0.2),
                    ("attention_dropout", 0.2),
                    ("hidden_dropout", 0.2),
                    ("weight_decay", 0.3),
                ] {
                    s.test_shift.insert(name.into(), shift);
                }
                for name in ["attention_dropout", "hidden_dropout"] {
                    s.dims.get_mut(name).expect("base dim").optimum = 0.0;
                }
                s.dims.get_mut("batch_size").expect("base dim").curvature = 0.0;
                s.noise_sd = 0.05;
                s.rho = -0.9;
                s
            }
            other => return Err(SurrogateError::UnknownPreset(other.to_string())),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub n: usize,
}

/// Sample Pearson correlation, accumulated in a single pass.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult, SurrogateError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(SurrogateError::LengthMismatch(x.len(), y.len()));
    }
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (&a, &b)) in x.iter().zip(y).enumerate() {
        let n = (i + 1) as f64;
        let dx = a - mx;
        let dy = b - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (a - mx);
        syy += dy * (b - my);
        sxy += dx * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(SurrogateError::UndefinedCorrelation);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok(CorrelationResult { r, n: x.len() })
}

/// Correlation between validation and test metric over the `k` best trials by validation.
pub fn top_k_correlation(
    trials: &[TrialRecord],
    k: usize,
) -> Result<CorrelationResult, SurrogateError> {
    let mut pairs: Vec<(f64, f64, u64)> = trials
        .iter()
        .filter_map(|t| {
            let best = t.best_checkpoint.as_ref()?;
            Some((best.val_metric, t.test_metric_at_best?, t.trial_id))
        })
        .collect();
    if k < 2 || pairs.len() < k {
        return Err(SurrogateError::InsufficientTrials {
            needed: k.max(2),
            got: pairs.len(),
        });
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
    let (val, test): (Vec<f64>, Vec<f64>) = pairs[..k].iter().map(|p| (p.0, p.1)).unzip();
    pearson(&val, &test)
}

/// Runs `tuner` on `spec` as given ("original") and on its aligned copy ("resplit").
pub fn resplit_experiment<F, E>(
    spec: &SurrogateSpec,
    mut tuner: F,
    k: usize,
) -> Result<(CorrelationResult, CorrelationResult), SurrogateError>
where
    F: FnMut(&SurrogateSpec) -> Result<Vec<TrialRecord>, E>,
    E: std::fmt::Display,
{
    let original = tuner(spec).map_err(|e| SurrogateError::Tuner(e.to_string()))?;
    let resplit = tuner(&spec.aligned_copy()).map_err(|e| SurrogateError::Tuner(e.to_string()))?;
    Ok((top_k_correlation(&original, k)?, top_k_correlation(&resplit, k)?))
}

struct SlotState {
    config: TrialConfig,
    total: u32,
    next_step: u32,
    stopped: bool,
}

/// In-process evaluator backed by a [`SurrogateSpec`].
pub struct SurrogateEvaluator {
    spec: SurrogateSpec,
    size: TaskSize,
    slots: BTreeMap<usize, SlotState>,
}

impl SurrogateEvaluator {
    pub fn new(spec: SurrogateSpec, size: TaskSize) -> Result<Self, SurrogateError> {
        spec.validate()?;
        Ok(Self {
            spec,
            size,
            slots: BTreeMap::new(),
        })
    }

    pub fn spec(&self) -> &SurrogateSpec {
        &self.spec
    }
}

impl Evaluator for SurrogateEvaluator {
    fn task_size(&self) -> TaskSize {
        self.size
    }

    fn start(&mut self, slot: usize, start: &TrialStart) -> Result<(), EvalError> {
        self.slots.insert(
            slot,
            SlotState {
                config: start.config.clone(),
                total: start.plan.total_checkpoints(),
                next_step: 1,
                stopped: false,
            },
        );
        Ok(())
    }

    fn next_report(&mut self, slot: usize) -> Result<Option<Report>, EvalError> {
        let state = self.slots.get_mut(&slot).ok_or(EvalError::NoActiveTrial(slot))?;
        if state.stopped || state.next_step > state.total {
            return Ok(None);
        }
        let step = state.next_step;
        state.next_step += 1;
        let (val_metric, val_loss, cost) = evaluate(&self.spec, &state.config, step);
        Ok(Some(Report {
            step,
            val_metric,
            val_loss,
            cost_seconds: cost,
        }))
    }

    fn stop(&mut self, slot: usize) -> Result<(), EvalError> {
        let state = self.slots.get_mut(&slot).ok_or(EvalError::NoActiveTrial(slot))?;
        state.stopped = true;
        Ok(())
    }

    fn finish(&mut self, slot: usize, best_step: Option<u32>) -> Result<FinalReport, EvalError> {
        let state = self.slots.remove(&slot).ok_or(EvalError::NoActiveTrial(slot))?;
        Ok(FinalReport {
            best_step,
            test_metric_at_best: best_step.map(|s| test_at(&self.spec, &state.config, s)),
        })
    }
}

/// Plan helper mirroring how the engine sizes surrogate trials.
pub fn plan_for(epochs: u32, size: TaskSize) -> TrialPlan {
    TrialPlan::new(epochs, size)
}
