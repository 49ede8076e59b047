//! Declarative use-case onboarding records and their validation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureSchema;

/// Default data retention window in days.
pub const DEFAULT_RETENTION_DAYS: u32 = 35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionKind {
    Binary,
    Multiclass,
    /// Choose or order items from a candidate set; scored per item with
    /// binary-classification scores.
    RankingCandidateSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionSpace {
    pub actions: Vec<String>,
    pub kind: DecisionKind,
}

impl DecisionSpace {
    pub fn binary(no: &str, yes: &str) -> Self {
        Self { actions: vec![no.to_string(), yes.to_string()], kind: DecisionKind::Binary }
    }

    pub fn multiclass(actions: &[&str]) -> Self {
        Self { actions: actions.iter().map(|a| a.to_string()).collect(), kind: DecisionKind::Multiclass }
    }

    pub fn index_of(&self, action: &str) -> Option<usize> {
        self.actions.iter().position(|a| a == action)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// Multiplier that turns the metric into a maximize-oriented one.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricTiming {
    Immediate,
    Delayed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Mean,
    CumulativeDiscounted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductMetricSpec {
    pub name: String,
    pub direction: Direction,
    pub timing: MetricTiming,
    pub aggregation: Aggregation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guardrail: Option<f64>,
    /// Label assigned when no observation arrives within the join window.
    #[serde(default)]
    pub timeout_default: f64,
}

impl ProductMetricSpec {
    pub fn immediate(name: &str, direction: Direction) -> Self {
        Self {
            name: name.to_string(),
            direction,
            timing: MetricTiming::Immediate,
            aggregation: Aggregation::Mean,
            guardrail: None,
            timeout_default: 0.0,
        }
    }

    pub fn delayed_cumulative(name: &str, direction: Direction) -> Self {
        Self {
            name: name.to_string(),
            direction,
            timing: MetricTiming::Delayed,
            aggregation: Aggregation::CumulativeDiscounted,
            guardrail: None,
            timeout_default: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    BinaryClassification,
    Regression,
    MulticlassValue,
    #[serde(rename = "HTE")]
    Hte,
    ContextualBandit,
    OfflineRL,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UseCaseSpec {
    pub id: String,
    pub decision_space: DecisionSpace,
    pub metrics: Vec<ProductMetricSpec>,
    pub features: FeatureSchema,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_hint: Option<TaskKind>,
    /// Seconds an observation may trail its prediction and still join.
    pub join_window: i64,
    /// Days of data kept for training.
    #[serde(default = "default_retention")]
    pub retention: u32,
    #[serde(default)]
    pub exploration_epsilon: f64,
    /// Simulation preset bound to the use case for simulated online stages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_env: Option<String>,
}

fn default_retention() -> u32 {
    DEFAULT_RETENTION_DAYS
}

impl UseCaseSpec {
    pub fn join_window_secs(&self) -> i64 {
        self.join_window
    }

    pub fn retention_secs(&self) -> i64 {
        i64::from(self.retention) * 86_400
    }

    pub fn metric(&self, name: &str) -> Option<&ProductMetricSpec> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn metric_index(&self, name: &str) -> Option<usize> {
        self.metrics.iter().position(|m| m.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail")]
pub enum SpecError {
    #[error("use case id is empty")]
    EmptyId,
    #[error("decision space has no actions")]
    EmptyDecisionSpace,
    #[error("duplicate action `{0}`")]
    DuplicateAction(String),
    #[error("binary decision space needs exactly 2 actions, got {0}")]
    BinaryArity(usize),
    #[error("no product metrics declared")]
    NoMetrics,
    #[error("duplicate metric `{0}`")]
    DuplicateMetric(String),
    #[error("metric `{0}`: cumulative-discounted aggregation requires delayed timing")]
    BadAggregation(String),
    #[error("duplicate feature column `{0}`")]
    DuplicateColumn(String),
    #[error("bad window: join_window={join_window}s, retention={retention_days}d")]
    BadWindow { join_window: i64, retention_days: u32 },
    #[error("exploration epsilon {0} outside [0,1]")]
    BadEpsilon(String),
}

/// All problems found in one spec, in discovery order.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("invalid use case spec: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
pub struct SpecErrors(pub Vec<SpecError>);

impl SpecErrors {
    pub fn contains(&self, pred: impl Fn(&SpecError) -> bool) -> bool {
        self.0.iter().any(pred)
    }
}

/// A spec that passed validation, in normalized form: metrics sorted by name
/// and feature schema at version 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidatedSpec(UseCaseSpec);

impl ValidatedSpec {
    pub fn into_inner(self) -> UseCaseSpec {
        self.0
    }

    /// Wraps a spec that was previously validated and persisted.
    pub fn assume_valid(spec: UseCaseSpec) -> Self {
        Self(spec)
    }
}

impl std::ops::Deref for ValidatedSpec {
    type Target = UseCaseSpec;

    fn deref(&self) -> &UseCaseSpec {
        &self.0
    }
}

/// Validates and normalizes a use-case spec. Pure and deterministic.
pub fn validate_spec(spec: &UseCaseSpec) -> Result<ValidatedSpec, SpecErrors> {
    let mut errors = Vec::new();
    if spec.id.trim().is_empty() {
        errors.push(SpecError::EmptyId);
    }

    let ds = &spec.decision_space;
    if ds.actions.is_empty() {
        errors.push(SpecError::EmptyDecisionSpace);
    }
    let mut seen = BTreeSet::new();
    for a in &ds.actions {
        if !seen.insert(a.as_str()) {
            errors.push(SpecError::DuplicateAction(a.clone()));
        }
    }
    if ds.kind == DecisionKind::Binary && !ds.actions.is_empty() && ds.actions.len() != 2 {
        errors.push(SpecError::BinaryArity(ds.actions.len()));
    }

    if spec.metrics.is_empty() {
        errors.push(SpecError::NoMetrics);
    }
    let mut seen = BTreeSet::new();
    for m in &spec.metrics {
        if !seen.insert(m.name.as_str()) {
            errors.push(SpecError::DuplicateMetric(m.name.clone()));
        }
        if m.aggregation == Aggregation::CumulativeDiscounted && m.timing != MetricTiming::Delayed {
            errors.push(SpecError::BadAggregation(m.name.clone()));
        }
    }

    for name in spec.features.duplicate_names() {
        errors.push(SpecError::DuplicateColumn(name));
    }

    if spec.join_window <= 0 || spec.retention_secs() < spec.join_window {
        errors.push(SpecError::BadWindow { join_window: spec.join_window, retention_days: spec.retention });
    }
    if !(0.0..=1.0).contains(&spec.exploration_epsilon) {
        errors.push(SpecError::BadEpsilon(spec.exploration_epsilon.to_string()));
    }

    if !errors.is_empty() {
        return Err(SpecErrors(errors));
    }

    let mut normalized = spec.clone();
    normalized.metrics.sort_by(|a, b| a.name.cmp(&b.name));
    normalized.features.version = 1;
    Ok(ValidatedSpec(normalized))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureColumn;

    pub(crate) fn sample_spec() -> UseCaseSpec {
        UseCaseSpec {
            id: "prefetch".into(),
            decision_space: DecisionSpace::binary("skip", "prefetch"),
            metrics: vec![
                ProductMetricSpec::immediate("success", Direction::Maximize),
                ProductMetricSpec::immediate("cost", Direction::Minimize),
            ],
            features: FeatureSchema::new(vec![FeatureColumn::numeric("age", true)]),
            task_hint: None,
            join_window: 3600,
            retention: DEFAULT_RETENTION_DAYS,
            exploration_epsilon: 0.05,
            sim_env: None,
        }
    }

    #[test]
    fn well_formed_spec_is_normalized() {
        let v = validate_spec(&sample_spec()).unwrap();
        let names: Vec<_> = v.metrics.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["cost", "success"]);
        assert_eq!(v.features.version, 1);
    }

    #[test]
    fn empty_actions_rejected() {
        let mut s = sample_spec();
        s.decision_space.actions.clear();
        let err = validate_spec(&s).unwrap_err();
        assert!(err.contains(|e| *e == SpecError::EmptyDecisionSpace));
    }

    #[test]
    fn duplicate_metric_rejected() {
        let mut s = sample_spec();
        s.metrics = vec![
            ProductMetricSpec::immediate("ctr", Direction::Maximize),
            ProductMetricSpec::immediate("ctr", Direction::Maximize),
        ];
        let err = validate_spec(&s).unwrap_err();
        assert!(err.contains(|e| matches!(e, SpecError::DuplicateMetric(m) if m == "ctr")));
    }

    #[test]
    fn bad_windows_rejected() {
        let mut s = sample_spec();
        s.join_window = 0;
        assert!(validate_spec(&s).unwrap_err().contains(|e| matches!(e, SpecError::BadWindow { .. })));
        let mut s = sample_spec();
        s.retention = 1;
        s.join_window = 2 * 86_400;
        assert!(validate_spec(&s).unwrap_err().contains(|e| matches!(e, SpecError::BadWindow { .. })));
    }

    #[test]
    fn cumulative_requires_delayed() {
        let mut s = sample_spec();
        s.metrics[0].aggregation = Aggregation::CumulativeDiscounted;
        assert!(validate_spec(&s).unwrap_err().contains(|e| matches!(e, SpecError::BadAggregation(_))));
    }

    #[test]
    fn binary_needs_two_actions() {
        let mut s = sample_spec();
        s.decision_space.actions.push("third".into());
        assert!(validate_spec(&s).unwrap_err().contains(|e| matches!(e, SpecError::BinaryArity(3))));
    }

    #[test]
    fn retention_defaults_to_35_days() {
        let json = r#"{"id":"u","decision_space":{"actions":["a","b"],"kind":"binary"},
            "metrics":[{"name":"m","direction":"maximize","timing":"immediate","aggregation":"mean"}],
            "features":{"columns":[]},"join_window":60}"#;
        let s: UseCaseSpec = serde_json::from_str(json).unwrap();
        assert_eq!(s.retention, 35);
        assert!(validate_spec(&s).is_ok());
    }

    #[test]
    fn validation_is_deterministic() {
        let s = sample_spec();
        assert_eq!(validate_spec(&s), validate_spec(&s));
    }
}
