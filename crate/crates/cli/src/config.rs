//! Experiment configuration: one TOML file per experiment.
//!
//! Environment overrides are limited to `HPOTRIAGE_SEED` (surrogate seed) and
//! `HPOTRIAGE_SLOTS` (worker slots).

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use hpotriage_core::engine::{Algorithm, HpoOptions, TrialPlan};
use hpotriage_core::procedure::{MiningParams, ProcedureConfig, SpaceLadder};
use hpotriage_core::protocol::{ClockMode, ProcessEvaluator};
use hpotriage_core::sampler::TpeParams;
use hpotriage_core::scheduler::AshaConfig;
use hpotriage_core::space::{
    expand_grid_to_hpo, minimal_space, presets, reduce_space, ExpansionRule, Scalar, SpaceError,
};
use hpotriage_core::surrogate::{presets::preset, SurrogateError, SurrogateEvaluator};
use hpotriage_core::verdict::DEFAULT_EPSILON;
use hpotriage_core::{Evaluator, GridSpec, SearchSpace, TaskSize};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEED_ENV: &str = "HPOTRIAGE_SEED";
pub const SLOTS_ENV: &str = "HPOTRIAGE_SLOTS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: key `{key}`: {message}")]
    Parse {
        path: String,
        key: String,
        message: String,
    },
    #[error("key `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("environment variable {name}={value}: {message}")]
    Env {
        name: &'static str,
        value: String,
        message: String,
    },
}

fn invalid(key: &str, message: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskConfig {
    Surrogate {
        preset: String,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_size")]
        size: TaskSize,
    },
    External {
        command: Vec<String>,
        #[serde(default = "default_size")]
        size: TaskSize,
        #[serde(default = "default_clock")]
        clock: ClockMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_seconds: Option<u64>,
    },
}

fn default_size() -> TaskSize {
    TaskSize::Small
}

fn default_clock() -> ClockMode {
    ClockMode::Declared
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<BTreeMap<String, Vec<Scalar>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RulesConfig {
    Preset(String),
    Explicit(BTreeMap<String, ExpansionRule>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LadderMode {
    #[default]
    Predeclared,
    Mining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    pub rules: RulesConfig,
    #[serde(default)]
    pub ladder: LadderMode,
    /// Middle rungs, each naming the hyperparameters fixed at their grid value.
    #[serde(default)]
    pub reduce: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mining: Option<MiningParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AshaSection {
    #[serde(default = "default_grace")]
    pub grace_period: u32,
    #[serde(default = "default_eta")]
    pub reduction_factor: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_t: Option<u32>,
}

fn default_grace() -> u32 {
    hpotriage_core::engine::DEFAULT_GRACE_PERIOD
}

fn default_eta() -> u32 {
    hpotriage_core::engine::DEFAULT_REDUCTION_FACTOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: TaskConfig,
    pub grid: GridConfig,
    pub space: SpaceConfig,
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_rep_seeds")]
    pub rep_seeds: Vec<u64>,
    #[serde(default = "default_training_seed")]
    pub training_seed: u64,
    #[serde(default = "default_ladder")]
    pub budget_ladder: Vec<f64>,
    /// Grid-search time in seconds; measured from the grid run when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gst_seconds: Option<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_slots")]
    pub slots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asha: Option<AshaSection>,
    #[serde(default)]
    pub tpe: TpeParams,
}

fn default_rep_seeds() -> Vec<u64> {
    hpotriage_core::engine::DEFAULT_REP_SEEDS.to_vec()
}

fn default_training_seed() -> u64 {
    hpotriage_core::engine::DEFAULT_TRAINING_SEED
}

fn default_ladder() -> Vec<f64> {
    vec![1.0, 4.0]
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_slots() -> usize {
    1
}

/// Everything a command needs, built and cross-checked from the config.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub grid: GridSpec,
    pub full: SearchSpace,
    pub rungs: Vec<SearchSpace>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            ConfigError::Parse {
                path: origin.to_string(),
                key: if key.is_empty() { ".".into() } else { key },
                message: e.into_inner().message().trim().to_string(),
            }
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Applies `HPOTRIAGE_SEED` and `HPOTRIAGE_SLOTS` when set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(value) = std::env::var(SEED_ENV) {
            let seed = value.parse::<u64>().map_err(|e| ConfigError::Env {
                name: SEED_ENV,
                value: value.clone(),
                message: e.to_string(),
            })?;
            self.set_seed(seed);
        }
        if let Ok(value) = std::env::var(SLOTS_ENV) {
            let slots = value.parse::<usize>().map_err(|e| ConfigError::Env {
                name: SLOTS_ENV,
                value: value.clone(),
                message: e.to_string(),
            })?;
            self.slots = slots;
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        if let TaskConfig::Surrogate { seed: s, .. } = &mut self.task {
            *s = seed;
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec, ConfigError> {
        let g = &self.grid;
        match (&g.preset, &g.values) {
            (Some(_), Some(_)) => Err(invalid("grid", "give either `preset` or `values`, not both")),
            (None, None) => Err(invalid("grid", "missing `preset` or `values`")),
            (Some(name), None) => match name.as_str() {
                "electra" => Ok(presets::electra_grid(g.epochs.unwrap_or(3))),
                "roberta" => {
                    if g.epochs.is_some_and(|e| e != 10) {
                        return Err(invalid("grid.epochs", "the roberta grid trains for 10 epochs"));
                    }
                    Ok(presets::roberta_grid())
                }
                other => Err(invalid("grid.preset", format!("unknown grid preset `{other}`"))),
            },
            (None, Some(values)) => {
                let epochs = g
                    .epochs
                    .ok_or_else(|| invalid("grid.epochs", "required with explicit values"))?;
                GridSpec::new(values.clone(), epochs).map_err(|e| invalid("grid.values", e))
            }
        }
    }

    fn rules(&self) -> Result<BTreeMap<String, ExpansionRule>, ConfigError> {
        match &self.space.rules {
            RulesConfig::Preset(name) => match name.as_str() {
                "electra" => Ok(presets::electra_rules()),
                "roberta" => Ok(presets::roberta_rules()),
                other => Err(invalid("space.rules", format!("unknown rules preset `{other}`"))),
            },
            RulesConfig::Explicit(map) => Ok(map.clone()),
        }
    }

    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return Err(invalid("name", "use letters, digits, `-`, `_` or `.`"));
        }
        if self.algorithms.is_empty() {
            return Err(invalid("algorithms", "at least one algorithm is required"));
        }
        if self.rep_seeds.is_empty() {
            return Err(invalid("rep_seeds", "at least one repetition is required"));
        }
        if self.slots == 0 {
            return Err(invalid("slots", "must be >= 1"));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(invalid("epsilon", "must be finite and >= 0"));
        }
        if self.budget_ladder.is_empty()
            || self.budget_ladder.iter().any(|a| !(a.is_finite() && *a > 0.0))
            || self.budget_ladder.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(invalid("budget_ladder", "must be positive and strictly increasing"));
        }
        if let Some(g) = self.gst_seconds {
            if !(g.is_finite() && g > 0.0) {
                return Err(invalid("gst_seconds", "must be positive"));
            }
        }
        match &self.task {
            TaskConfig::Surrogate { preset: name, seed, .. } => {
                preset(name, *seed).map_err(|e| invalid("task.preset", e))?;
            }
            TaskConfig::External { command, .. } => {
                if command.is_empty() {
                    return Err(invalid("task.command", "must name a program"));
                }
            }
        }
        self.tpe.validate().map_err(|e| invalid("tpe", e))?;
        if let Some(a) = &self.asha {
            AshaConfig::new(a.grace_period, a.reduction_factor, a.max_t.unwrap_or(u32::MAX))
                .map_err(|e| invalid("asha", e))?;
        }
        let grid = self.grid_spec()?;
        let full = expand_grid_to_hpo(&grid, &self.rules()?).map_err(|e| invalid("space.rules", e))?;
        let mut rungs = vec![full.clone()];
        match self.space.ladder {
            LadderMode::Predeclared => {
                if self.space.mining.is_some() {
                    return Err(invalid("space.mining", "only valid with ladder = \"mining\""));
                }
                for (i, names) in self.space.reduce.iter().enumerate() {
                    let fixes = fixes_at_grid(&grid, names)
                        .map_err(|e| invalid(&format!("space.reduce[{i}]"), e))?;
                    rungs.push(
                        reduce_space(&full, &fixes)
                            .map_err(|e| invalid(&format!("space.reduce[{i}]"), e))?,
                    );
                }
                rungs.push(minimal_space(&full, &grid));
            }
            LadderMode::Mining => {
                if !self.space.reduce.is_empty() {
                    return Err(invalid("space.reduce", "not used with ladder = \"mining\""));
                }
                let p = self.mining_params();
                if !(p.theta > 0.0 && p.theta <= 1.0) || !(p.delta.is_finite() && p.delta >= 0.0) {
                    return Err(invalid("space.mining", "need 0 < theta <= 1 and delta >= 0"));
                }
            }
        }
        Ok(Resolved { grid, full, rungs })
    }

    pub fn mining_params(&self) -> MiningParams {
        self.space.mining.unwrap_or_default()
    }

    pub fn task_size(&self) -> TaskSize {
        match &self.task {
            TaskConfig::Surrogate { size, .. } | TaskConfig::External { size, .. } => *size,
        }
    }

    pub fn hpo_options(&self, epochs: u32) -> HpoOptions {
        HpoOptions {
            epochs,
            slots: self.slots,
            asha: self.asha.map(|a| AshaConfig {
                grace_period: a.grace_period,
                reduction_factor: a.reduction_factor,
                max_t: a
                    .max_t
                    .unwrap_or_else(|| TrialPlan::new(epochs, self.task_size()).total_checkpoints()),
            }),
            tpe: self.tpe,
            training_seed: self.training_seed,
        }
    }

    pub fn procedure_config(&self, resolved: &Resolved) -> ProcedureConfig {
        let space_ladder = match self.space.ladder {
            LadderMode::Predeclared => SpaceLadder::Predeclared(resolved.rungs.clone()),
            LadderMode::Mining => SpaceLadder::Mining {
                full: resolved.full.clone(),
                params: self.mining_params(),
            },
        };
        ProcedureConfig {
            budget_ladder: self.budget_ladder.clone(),
            space_ladder,
            rep_seeds: self.rep_seeds.clone(),
            epsilon: self.epsilon,
            hpo: self.hpo_options(resolved.grid.epochs()),
        }
    }

    pub fn evaluator(&self) -> Result<Box<dyn Evaluator>, SurrogateError> {
        Ok(match &self.task {
            TaskConfig::Surrogate { preset: name, seed, size } => {
                Box::new(SurrogateEvaluator::new(preset(name, *seed)?, *size)?)
            }
            TaskConfig::External {
                command,
                size,
                clock,
                timeout_seconds,
            } => {
                let mut e = ProcessEvaluator::new(command[0].clone(), command[1..].to_vec(), *size)
                    .with_clock(*clock);
                if let Some(t) = timeout_seconds {
                    e = e.with_timeout(Duration::from_secs(*t));
                }
                Box::new(e)
            }
        })
    }
}

fn fixes_at_grid(grid: &GridSpec, names: &[String]) -> Result<Vec<(String, Scalar)>, SpaceError> {
    names
        .iter()
        .map(|name| match grid.values(name) {
            Some([v]) => Ok((name.clone(), v.clone())),
            Some(vs) => Err(SpaceError::InvalidExpansion {
                name: name.clone(),
                reason: format!("grid has {} values; only single-valued entries can be fixed", vs.len()),
            }),
            None => Err(SpaceError::InvalidExpansion {
                name: name.clone(),
                reason: "not in the grid".into(),
            }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const RTE: &str = r#"
name = "electra-rte"
algorithms = ["RS", "ASHA"]

[task]
kind = "surrogate"
preset = "planted-overfit"
seed = 4

[grid]
preset = "electra"
epochs = 3

[space]
rules = "electra"
reduce = [["warmup_ratio"]]
"#;

    #[test]
    fn loads_and_resolves_ladder() {
        let cfg = ExperimentConfig::parse(RTE, "rte.toml").unwrap();
        let r = cfg.resolve().unwrap();
        let labels: Vec<&str> = r.rungs.iter().map(|s| s.label()).collect();
        assert_eq!(labels, ["S_full", "S_-wr", "S_min"]);
        assert_eq!(cfg.rep_seeds, vec![1, 2, 3]);
        assert_eq!(cfg.budget_ladder, vec![1.0, 4.0]);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::parse(RTE, "rte.toml").unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml(), "again").unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let text = RTE.replace("rules = \"electra\"", "rules = \"electra\"\nlabel = \"x\"");
        match ExperimentConfig::parse(&text, "rte.toml") {
            Err(ConfigError::Parse { key, message, .. }) => {
                assert_eq!(key, "space.label");
                assert!(message.contains("unknown field `label`"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_algorithm_is_a_load_error() {
        let text = RTE.replace("\"ASHA\"]", "\"Hyperband\"]");
        match ExperimentConfig::parse(&text, "rte.toml") {
            Err(ConfigError::Parse { key, .. }) => assert_eq!(key, "algorithms[1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn multi_valued_grid_entry_cannot_be_fixed() {
        let text = RTE.replace("[[\"warmup_ratio\"]]", "[[\"learning_rate\"]]");
        let cfg = ExperimentConfig::parse(&text, "rte.toml").unwrap();
        assert!(matches!(cfg.resolve(), Err(ConfigError::Invalid { key, .. }) if key == "space.reduce[0]"));
    }

    #[test]
    fn roberta_ladder_label() {
        let text = RTE
            .replace("preset = \"electra\"\nepochs = 3", "preset = \"roberta\"")
            .replace("rules = \"electra\"", "rules = \"roberta\"")
            .replace("[[\"warmup_ratio\"]]", "[[\"warmup_ratio\", \"hidden_dropout\"]]");
        let r = ExperimentConfig::parse(&text, "x").unwrap().resolve().unwrap();
        assert_eq!(r.rungs[1].label(), "S_-wr-hdo");
    }

    #[test]
    fn bad_ladders_are_rejected() {
        for (from, to, key) in [
            ("algorithms = [\"RS\", \"ASHA\"]", "algorithms = []", "algorithms"),
            ("name = \"electra-rte\"", "name = \"a b\"", "name"),
            ("seed = 4", "seed = 4\n[x]", "x"),
        ] {
            let text = RTE.replace(from, to);
            let err = ExperimentConfig::parse(&text, "x")
                .and_then(|c| c.resolve().map(|_| c))
                .unwrap_err();
            let got = match &err {
                ConfigError::Parse { key, .. } | ConfigError::Invalid { key, .. } => key.clone(),
                other => panic!("{other:?}"),
            };
            assert_eq!(got, key, "{err}");
        }
        let mut cfg = ExperimentConfig::parse(RTE, "x").unwrap();
        cfg.budget_ladder = vec![4.0, 1.0];
        assert!(cfg.resolve().is_err());
    }
}
