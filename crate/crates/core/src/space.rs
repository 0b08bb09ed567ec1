//! Hyperparameter domains, grid definitions and search-space reduction.
//!
//! A [`SearchSpace`] maps hyperparameter names to a [`Domain`]. Spaces are
//! built from a [`GridSpec`] with [`expand_grid_to_hpo`], narrowed with
//! [`reduce_space`] and collapsed to the grid hull with [`minimal_space`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used for real-valued membership tests.
pub const MEMBERSHIP_TOLERANCE: f64 = 1e-12;

/// Label of the unreduced space.
pub const FULL_LABEL: &str = "S_full";
/// Label of the space that only searches hyperparameters with several grid values.
pub const MIN_LABEL: &str = "S_min";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("invalid domain for `{name}`: {reason}")]
    InvalidDomain { name: String, reason: String },
    #[error("invalid expansion for `{name}`: {reason}")]
    InvalidExpansion { name: String, reason: String },
    #[error("value {value} for `{name}` lies outside its domain {domain}")]
    DomainViolation {
        name: String,
        value: Scalar,
        domain: Domain,
    },
    #[error("unknown hyperparameter `{0}`")]
    UnknownHyperparameter(String),
    #[error("configuration does not assign `{0}`")]
    IncompleteConfig(String),
    #[error("grid entry `{0}` has no values")]
    EmptyGridEntry(String),
}

/// A single hyperparameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Int(i64),
    Real(f64),
    Text(String),
}

impl Scalar {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Scalar::Int(v) => Some(v as f64),
            Scalar::Real(v) => Some(v),
            Scalar::Text(_) => None,
        }
    }

    /// Value equality where integers and reals compare numerically within `tol`.
    pub fn matches(&self, other: &Scalar, tol: f64) -> bool {
        match (self, other) {
            (Scalar::Text(a), Scalar::Text(b)) => a == b,
            (Scalar::Int(a), Scalar::Int(b)) => a == b,
            _ => match (self.as_f64(), other.as_f64()) {
                (Some(a), Some(b)) => (a - b).abs() <= tol,
                _ => false,
            },
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int(v) => write!(f, "{v}"),
            Scalar::Real(v) => write!(f, "{v}"),
            Scalar::Text(v) => write!(f, "{v:?}"),
        }
    }
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::Real(v)
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

impl From<&str> for Scalar {
    fn from(v: &str) -> Self {
        Scalar::Text(v.to_string())
    }
}

/// The set of values one hyperparameter may take.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Domain {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Categorical { values: Vec<Scalar> },
    Fixed { value: Scalar },
}

impl Domain {
    pub fn validate(&self, name: &str) -> Result<(), SpaceError> {
        let invalid = |reason: &str| SpaceError::InvalidDomain {
            name: name.to_string(),
            reason: reason.to_string(),
        };
        match self {
            Domain::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(invalid("requires finite lo < hi"));
                }
            }
            Domain::LogUniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo < hi) {
                    return Err(invalid("requires finite 0 < lo < hi"));
                }
            }
            Domain::Categorical { values } => {
                if values.is_empty() {
                    return Err(invalid("categorical domain has no values"));
                }
                for (i, a) in values.iter().enumerate() {
                    if values[i + 1..].iter().any(|b| a.matches(b, 0.0)) {
                        return Err(invalid("categorical values must be distinct"));
                    }
                }
            }
            Domain::Fixed { value } => {
                if let Some(v) = value.as_f64() {
                    if !v.is_finite() {
                        return Err(invalid("fixed value must be finite"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, value: &Scalar) -> bool {
        match self {
            Domain::Uniform { lo, hi } | Domain::LogUniform { lo, hi } => match value.as_f64() {
                Some(v) => v >= lo - MEMBERSHIP_TOLERANCE && v <= hi + MEMBERSHIP_TOLERANCE,
                None => false,
            },
            Domain::Categorical { values } => values.iter().any(|c| c.matches(value, 0.0)),
            Domain::Fixed { value: fixed } => fixed.matches(value, MEMBERSHIP_TOLERANCE),
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, Domain::Fixed { .. })
    }

    /// Numeric bounds of the domain, if it has any.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        match self {
            Domain::Uniform { lo, hi } | Domain::LogUniform { lo, hi } => Some((*lo, *hi)),
            Domain::Categorical { values } => {
                let nums: Option<Vec<f64>> = values.iter().map(Scalar::as_f64).collect();
                let nums = nums?;
                let lo = nums.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = nums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                Some((lo, hi))
            }
            Domain::Fixed { value } => value.as_f64().map(|v| (v, v)),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Uniform { lo, hi } => write!(f, "({lo}, {hi})"),
            Domain::LogUniform { lo, hi } => write!(f, "log(({lo}, {hi}))"),
            Domain::Categorical { values } => {
                let parts: Vec<String> = values.iter().map(|v| v.to_string()).collect();
                write!(f, "{{{}}}", parts.join(", "))
            }
            Domain::Fixed { value } => write!(f, "{value}"),
        }
    }
}

/// A hyperparameter configuration: one value per name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrialConfig {
    pub assignments: BTreeMap<String, Scalar>,
}

impl TrialConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<Scalar>) -> Self {
        self.assignments.insert(name.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Scalar> {
        self.assignments.get(name)
    }

    pub fn get_f64(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(Scalar::as_f64)
    }
}

impl FromIterator<(String, Scalar)> for TrialConfig {
    fn from_iter<I: IntoIterator<Item = (String, Scalar)>>(iter: I) -> Self {
        TrialConfig {
            assignments: iter.into_iter().collect(),
        }
    }
}

/// A labelled map of hyperparameter domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace", into = "RawSpace")]
pub struct SearchSpace {
    label: String,
    entries: BTreeMap<String, Domain>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpace {
    label: String,
    entries: BTreeMap<String, Domain>,
}

impl TryFrom<RawSpace> for SearchSpace {
    type Error = SpaceError;

    fn try_from(raw: RawSpace) -> Result<Self, Self::Error> {
        SearchSpace::new(raw.label, raw.entries)
    }
}

impl From<SearchSpace> for RawSpace {
    fn from(space: SearchSpace) -> Self {
        RawSpace {
            label: space.label,
            entries: space.entries,
        }
    }
}

impl SearchSpace {
    pub fn new(
        label: impl Into<String>,
        entries: BTreeMap<String, Domain>,
    ) -> Result<Self, SpaceError> {
        for (name, domain) in &entries {
            domain.validate(name)?;
        }
        Ok(Self {
            label: label.into(),
            entries,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn entries(&self) -> &BTreeMap<String, Domain> {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Domain> {
        self.entries.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Names whose domain is not `Fixed`.
    pub fn searchable(&self) -> impl Iterator<Item = (&String, &Domain)> {
        self.entries.iter().filter(|(_, d)| !d.is_fixed())
    }
}

/// Grid-search configuration: a finite value list per hyperparameter plus the epoch count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct GridSpec {
    entries: BTreeMap<String, Vec<Scalar>>,
    epochs: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    epochs: u32,
    entries: BTreeMap<String, Vec<Scalar>>,
}

impl TryFrom<RawGrid> for GridSpec {
    type Error = SpaceError;

    fn try_from(raw: RawGrid) -> Result<Self, Self::Error> {
        GridSpec::new(raw.entries, raw.epochs)
    }
}

impl From<GridSpec> for RawGrid {
    fn from(grid: GridSpec) -> Self {
        RawGrid {
            epochs: grid.epochs,
            entries: grid.entries,
        }
    }
}

impl GridSpec {
    pub fn new(entries: BTreeMap<String, Vec<Scalar>>, epochs: u32) -> Result<Self, SpaceError> {
        if let Some((name, _)) = entries.iter().find(|(_, v)| v.is_empty()) {
            return Err(SpaceError::EmptyGridEntry(name.clone()));
        }
        Ok(Self { entries, epochs })
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<Scalar>> {
        &self.entries
    }

    pub fn epochs(&self) -> u32 {
        self.epochs
    }

    pub fn values(&self, name: &str) -> Option<&[Scalar]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    /// Number of grid configurations.
    pub fn size(&self) -> usize {
        self.entries.values().map(Vec::len).product()
    }

    /// Cartesian product in name order; the last name varies fastest.
    pub fn combinations(&self) -> Vec<TrialConfig> {
        let mut out = vec![TrialConfig::new()];
        for (name, values) in &self.entries {
            out = out
                .into_iter()
                .flat_map(|base| {
                    values.iter().map(move |v| {
                        let mut c = base.clone();
                        c.assignments.insert(name.clone(), v.clone());
                        c
                    })
                })
                .collect();
        }
        out
    }
}

/// How a grid entry is widened into an HPO domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum ExpansionRule {
    /// Log-uniform range with the given endpoints.
    LogHull { lo: f64, hi: f64 },
    /// Uniform range with the given endpoints.
    Linear { lo: f64, hi: f64 },
    /// Categorical domain that must include every grid value.
    CategoricalSuperset { values: Vec<Scalar> },
    /// Keep the single grid value.
    Fixed,
    /// Use the given domain verbatim.
    Override { domain: Domain },
}

/// Widens every grid entry by its rule; every grid point must remain a member.
pub fn expand_grid_to_hpo(
    grid: &GridSpec,
    rules: &BTreeMap<String, ExpansionRule>,
) -> Result<SearchSpace, SpaceError> {
    let mut entries = BTreeMap::new();
    for name in rules.keys() {
        if !grid.entries.contains_key(name) {
            return Err(SpaceError::InvalidExpansion {
                name: name.clone(),
                reason: "rule given for a hyperparameter absent from the grid".into(),
            });
        }
    }
    for (name, values) in &grid.entries {
        let rule = rules.get(name).ok_or_else(|| SpaceError::InvalidExpansion {
            name: name.clone(),
            reason: "no expansion rule".into(),
        })?;
        let domain = match rule {
            ExpansionRule::LogHull { lo, hi } => Domain::LogUniform { lo: *lo, hi: *hi },
            ExpansionRule::Linear { lo, hi } => Domain::Uniform { lo: *lo, hi: *hi },
            ExpansionRule::CategoricalSuperset { values } => Domain::Categorical {
                values: values.clone(),
            },
            ExpansionRule::Fixed => {
                if values.len() != 1 {
                    return Err(SpaceError::InvalidExpansion {
                        name: name.clone(),
                        reason: format!("fixed rule needs one grid value, found {}", values.len()),
                    });
                }
                Domain::Fixed {
                    value: values[0].clone(),
                }
            }
            ExpansionRule::Override { domain } => domain.clone(),
        };
        domain
            .validate(name)
            .map_err(|e| SpaceError::InvalidExpansion {
                name: name.clone(),
                reason: e.to_string(),
            })?;
        if let Some(v) = values.iter().find(|v| !domain.contains(v)) {
            return Err(SpaceError::InvalidExpansion {
                name: name.clone(),
                reason: format!("domain {domain} excludes grid value {v}"),
            });
        }
        entries.insert(name.clone(), domain);
    }
    SearchSpace::new(FULL_LABEL, entries)
}

/// Short tag used when deriving labels of reduced spaces.
pub fn abbreviation(name: &str) -> &str {
    match name {
        "warmup_ratio" => "wr",
        "hidden_dropout" => "hdo",
        "attention_dropout" => "ado",
        "weight_decay" => "wd",
        "learning_rate" => "lr",
        "batch_size" => "bs",
        other => other,
    }
}

/// Fixes the named hyperparameters to the given values.
///
/// The label is derived from the fixed names in the order given, e.g.
/// `S_full` + `[warmup_ratio]` becomes `S_-wr`.
pub fn reduce_space(
    space: &SearchSpace,
    fixes: &[(String, Scalar)],
) -> Result<SearchSpace, SpaceError> {
    if fixes.is_empty() {
        return Ok(space.clone());
    }
    let mut entries = space.entries.clone();
    for (name, value) in fixes {
        let domain = entries
            .get(name)
            .ok_or_else(|| SpaceError::UnknownHyperparameter(name.clone()))?;
        if !domain.contains(value) {
            return Err(SpaceError::DomainViolation {
                name: name.clone(),
                value: value.clone(),
                domain: domain.clone(),
            });
        }
        entries.insert(
            name.clone(),
            Domain::Fixed {
                value: value.clone(),
            },
        );
    }
    let tags: Vec<&str> = fixes.iter().map(|(n, _)| abbreviation(n)).collect();
    let label = if space.label == FULL_LABEL {
        format!("S_-{}", tags.join("-"))
    } else {
        format!("{}-{}", space.label, tags.join("-"))
    };
    SearchSpace::new(label, entries)
}

/// Fixes every hyperparameter whose grid has a single value; the rest keep their domain.
pub fn minimal_space(space: &SearchSpace, grid: &GridSpec) -> SearchSpace {
    let entries = space
        .entries
        .iter()
        .map(|(name, domain)| {
            let domain = match grid.values(name) {
                Some([single]) => Domain::Fixed {
                    value: single.clone(),
                },
                _ => domain.clone(),
            };
            (name.clone(), domain)
        })
        .collect();
    SearchSpace {
        label: MIN_LABEL.to_string(),
        entries,
    }
}

/// Whether every assignment of `config` lies in its domain.
///
/// Assignments for names outside the space make the config a non-member.
pub fn contains(space: &SearchSpace, config: &TrialConfig) -> Result<bool, SpaceError> {
    for name in space.entries.keys() {
        if !config.assignments.contains_key(name) {
            return Err(SpaceError::IncompleteConfig(name.clone()));
        }
    }
    if config
        .assignments
        .keys()
        .any(|k| !space.entries.contains_key(k))
    {
        return Ok(false);
    }
    Ok(space
        .entries
        .iter()
        .all(|(name, domain)| domain.contains(&config.assignments[name])))
}

/// Search spaces and grids used for Electra-base and RoBERTa-base fine-tuning.
pub mod presets {
    use super::*;

    fn reals(v: &[f64]) -> Vec<Scalar> {
        v.iter().map(|&x| Scalar::Real(x)).collect()
    }

    fn ints(v: &[i64]) -> Vec<Scalar> {
        v.iter().map(|&x| Scalar::Int(x)).collect()
    }

    fn override_uniform(lo: f64, hi: f64) -> ExpansionRule {
        ExpansionRule::Override {
            domain: Domain::Uniform { lo, hi },
        }
    }

    pub fn electra_grid(epochs: u32) -> GridSpec {
        let mut e = BTreeMap::new();
        e.insert("learning_rate".into(), reals(&[3e-5, 1e-4, 1.5e-4]));
        e.insert("warmup_ratio".into(), reals(&[0.1]));
        e.insert("attention_dropout".into(), reals(&[0.1]));
        e.insert("hidden_dropout".into(), reals(&[0.1]));
        e.insert("weight_decay".into(), reals(&[0.0]));
        e.insert("batch_size".into(), ints(&[32]));
        GridSpec::new(e, epochs).expect("static grid")
    }

    pub fn electra_rules() -> BTreeMap<String, ExpansionRule> {
        let mut r = BTreeMap::new();
        r.insert(
            "learning_rate".into(),
            ExpansionRule::Override {
                domain: Domain::LogUniform {
                    lo: 2.99e-5,
                    hi: 1.51e-4,
                },
            },
        );
        r.insert("warmup_ratio".into(), override_uniform(0.0, 0.2));
        r.insert("attention_dropout".into(), override_uniform(0.0, 0.2));
        r.insert("hidden_dropout".into(), override_uniform(0.0, 0.2));
        r.insert("weight_decay".into(), override_uniform(0.0, 0.3));
        r.insert(
            "batch_size".into(),
            ExpansionRule::CategoricalSuperset {
                values: ints(&[16, 32, 64]),
            },
        );
        r
    }

    pub fn roberta_grid() -> GridSpec {
        let mut e = BTreeMap::new();
        e.insert("learning_rate".into(), reals(&[1e-5, 2e-5, 3e-5]));
        e.insert("warmup_ratio".into(), reals(&[0.06]));
        e.insert("attention_dropout".into(), reals(&[0.1]));
        e.insert("hidden_dropout".into(), reals(&[0.1]));
        e.insert("weight_decay".into(), reals(&[0.1]));
        e.insert("batch_size".into(), ints(&[16, 32]));
        GridSpec::new(e, 10).expect("static grid")
    }

    pub fn roberta_rules() -> BTreeMap<String, ExpansionRule> {
        let mut r = BTreeMap::new();
        r.insert("learning_rate".into(), override_uniform(0.99e-5, 3.01e-5));
        r.insert("warmup_ratio".into(), override_uniform(0.0, 0.12));
        r.insert("attention_dropout".into(), override_uniform(0.0, 0.2));
        r.insert("hidden_dropout".into(), override_uniform(0.0, 0.2));
        r.insert("weight_decay".into(), override_uniform(0.0, 0.3));
        r.insert(
            "batch_size".into(),
            ExpansionRule::CategoricalSuperset {
                values: ints(&[16, 32, 64]),
            },
        );
        r
    }

    /// Fixes applied for the middle rung of the Electra ladder.
    pub fn electra_fixes() -> Vec<(String, Scalar)> {
        vec![("warmup_ratio".into(), Scalar::Real(0.1))]
    }

    /// Fixes applied for the middle rung of the RoBERTa ladder.
    pub fn roberta_fixes() -> Vec<(String, Scalar)> {
        vec![
            ("warmup_ratio".into(), Scalar::Real(0.06)),
            ("hidden_dropout".into(), Scalar::Real(0.1)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;

    fn electra_full() -> SearchSpace {
        expand_grid_to_hpo(&electra_grid(10), &electra_rules()).unwrap()
    }

    #[test]
    fn electra_learning_rate_override() {
        let space = electra_full();
        assert_eq!(
            space.get("learning_rate"),
            Some(&Domain::LogUniform {
                lo: 2.99e-5,
                hi: 1.51e-4
            })
        );
        assert_eq!(
            space.get("weight_decay"),
            Some(&Domain::Uniform { lo: 0.0, hi: 0.3 })
        );
        assert_eq!(space.label(), FULL_LABEL);
    }

    #[test]
    fn fixed_rule_on_single_epoch_value() {
        let mut e = BTreeMap::new();
        e.insert("epochs".to_string(), vec![Scalar::Int(10)]);
        let grid = GridSpec::new(e, 10).unwrap();
        let mut rules = BTreeMap::new();
        rules.insert("epochs".to_string(), ExpansionRule::Fixed);
        let space = expand_grid_to_hpo(&grid, &rules).unwrap();
        assert_eq!(
            space.get("epochs"),
            Some(&Domain::Fixed {
                value: Scalar::Int(10)
            })
        );
    }

    #[test]
    fn expansion_excluding_grid_value_is_rejected() {
        let mut rules = electra_rules();
        rules.insert(
            "learning_rate".into(),
            ExpansionRule::LogHull { lo: 5e-5, hi: 2e-4 },
        );
        let err = expand_grid_to_hpo(&electra_grid(3), &rules).unwrap_err();
        assert!(matches!(err, SpaceError::InvalidExpansion { ref name, .. } if name == "learning_rate"));
    }

    #[test]
    fn fixed_rule_with_several_values_is_rejected() {
        let mut rules = electra_rules();
        rules.insert("learning_rate".into(), ExpansionRule::Fixed);
        assert!(expand_grid_to_hpo(&electra_grid(3), &rules).is_err());
    }

    #[test]
    fn missing_rule_is_rejected() {
        let mut rules = electra_rules();
        rules.remove("batch_size");
        assert!(expand_grid_to_hpo(&electra_grid(3), &rules).is_err());
    }

    #[test]
    fn every_grid_point_is_a_member() {
        let full = electra_full();
        for c in electra_grid(10).combinations() {
            assert!(contains(&full, &c).unwrap(), "{c:?}");
        }
        let roberta = expand_grid_to_hpo(&roberta_grid(), &roberta_rules()).unwrap();
        let combos = roberta_grid().combinations();
        assert_eq!(combos.len(), 6);
        for c in combos {
            assert!(contains(&roberta, &c).unwrap());
        }
    }

    #[test]
    fn reduce_fixes_warmup() {
        let reduced = reduce_space(&electra_full(), &electra_fixes()).unwrap();
        assert_eq!(reduced.label(), "S_-wr");
        assert_eq!(
            reduced.get("warmup_ratio"),
            Some(&Domain::Fixed {
                value: Scalar::Real(0.1)
            })
        );
        assert_eq!(
            reduced.get("hidden_dropout"),
            electra_full().get("hidden_dropout")
        );
    }

    #[test]
    fn reduce_roberta_two_hyperparameters() {
        let full = expand_grid_to_hpo(&roberta_grid(), &roberta_rules()).unwrap();
        let reduced = reduce_space(&full, &roberta_fixes()).unwrap();
        assert_eq!(reduced.label(), "S_-wr-hdo");
        assert!(reduced.get("warmup_ratio").unwrap().is_fixed());
        assert!(reduced.get("hidden_dropout").unwrap().is_fixed());
        assert!(!reduced.get("attention_dropout").unwrap().is_fixed());
    }

    #[test]
    fn reduce_with_no_fixes_is_identity() {
        let full = electra_full();
        assert_eq!(reduce_space(&full, &[]).unwrap(), full);
    }

    #[test]
    fn reduce_outside_domain_is_rejected() {
        let err = reduce_space(&electra_full(), &[("warmup_ratio".into(), Scalar::Real(0.5))])
            .unwrap_err();
        assert!(matches!(err, SpaceError::DomainViolation { .. }));
        let err = reduce_space(&electra_full(), &[("momentum".into(), Scalar::Real(0.5))])
            .unwrap_err();
        assert_eq!(err, SpaceError::UnknownHyperparameter("momentum".into()));
    }

    #[test]
    fn minimal_space_electra_searches_learning_rate_only() {
        let min = minimal_space(&electra_full(), &electra_grid(10));
        let searchable: Vec<&String> = min.searchable().map(|(n, _)| n).collect();
        assert_eq!(searchable, vec!["learning_rate"]);
        assert_eq!(min.label(), MIN_LABEL);
    }

    #[test]
    fn minimal_space_roberta_searches_lr_and_batch() {
        let full = expand_grid_to_hpo(&roberta_grid(), &roberta_rules()).unwrap();
        let min = minimal_space(&full, &roberta_grid());
        let searchable: Vec<&String> = min.searchable().map(|(n, _)| n).collect();
        assert_eq!(searchable, vec!["batch_size", "learning_rate"]);
        // batch size keeps its expanded categorical domain
        assert_eq!(min.get("batch_size"), full.get("batch_size"));
    }

    #[test]
    fn minimal_space_on_all_fixed_space_keeps_entries() {
        let mut e = BTreeMap::new();
        e.insert(
            "a".to_string(),
            Domain::Fixed {
                value: Scalar::Real(1.0),
            },
        );
        let space = SearchSpace::new(MIN_LABEL, e).unwrap();
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), vec![Scalar::Real(1.0)]);
        let grid = GridSpec::new(g, 1).unwrap();
        assert_eq!(minimal_space(&space, &grid), space);
    }

    #[test]
    fn contains_out_of_bounds_and_non_member() {
        let full = electra_full();
        let base = electra_grid(10).combinations()[0].clone();
        let lr = base.clone().with("learning_rate", 2e-4);
        assert!(!contains(&full, &lr).unwrap());
        let bs = base.clone().with("batch_size", 48i64);
        assert!(!contains(&full, &bs).unwrap());
        let mut missing = base;
        missing.assignments.remove("weight_decay");
        assert_eq!(
            contains(&full, &missing).unwrap_err(),
            SpaceError::IncompleteConfig("weight_decay".into())
        );
    }

    #[test]
    fn boundary_values_are_members() {
        let d = Domain::LogUniform {
            lo: 2.99e-5,
            hi: 1.51e-4,
        };
        assert!(d.contains(&Scalar::Real(2.99e-5)));
        assert!(d.contains(&Scalar::Real(1.51e-4)));
        assert!(d.contains(&Scalar::Real(1.51e-4 + 5e-13)));
        assert!(!d.contains(&Scalar::Real(1.51e-4 + 1e-11)));
    }

    #[test]
    fn invalid_domains_are_rejected() {
        assert!(Domain::Uniform { lo: 1.0, hi: 1.0 }.validate("x").is_err());
        assert!(Domain::LogUniform { lo: 0.0, hi: 1.0 }.validate("x").is_err());
        assert!(Domain::Categorical {
            values: vec![Scalar::Int(1), Scalar::Int(1)]
        }
        .validate("x")
        .is_err());
        assert!(GridSpec::new(
            [("x".to_string(), vec![])].into_iter().collect(),
            1
        )
        .is_err());
    }

    #[test]
    fn space_serializes_as_nested_maps() {
        let json = serde_json::to_value(electra_full()).unwrap();
        assert_eq!(json["entries"]["learning_rate"]["kind"], "loguniform");
        assert_eq!(json["entries"]["learning_rate"]["lo"], 2.99e-5);
        let back: SearchSpace = serde_json::from_value(json).unwrap();
        assert_eq!(back, electra_full());
        let bad = serde_json::json!({"label": "x", "entries": {"a": {"kind": "uniform", "lo": 2.0, "hi": 1.0}}});
        assert!(serde_json::from_value::<SearchSpace>(bad).is_err());
    }
}
