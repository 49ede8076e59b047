//! Automatic configuration: problem formulation from the use-case spec,
//! model family selection and budgeted hyperparameter search.

mod search;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use search::{cv_score, select_model, tune_hyperparams, CvData, Leaderboard, LeaderboardEntry, ParamSpec, Scale, SearchSpace, CV_FOLDS, MIN_UNITS_PER_FOLD};

use crate::models::ModelError;
use crate::prep::SplitError;
use crate::usecase::{Aggregation, DecisionKind, MetricTiming, TaskKind, ValidatedSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutoconfError {
    #[error("task is ambiguous: {0}")]
    AmbiguousTask(String),
    #[error("need at least {need} units, have {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("no model families for task {0:?}")]
    UnsupportedTask(TaskKind),
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("invalid search space: {0}")]
    BadSpace(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Split(#[from] SplitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// Every label is 0 or 1.
    Binary,
    /// Nonnegative integers with more than two values.
    Categorical,
    Real,
    /// No labels seen yet.
    Unknown,
}

/// What the observed labels look like.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDiagnostics {
    pub label_kind: LabelKind,
    /// Rows carry A/B experiment variants as their action.
    pub variant_labeled: bool,
}

impl LabelDiagnostics {
    pub fn from_labels(labels: &[f64], variant_labeled: bool) -> Self {
        let label_kind = if labels.is_empty() {
            LabelKind::Unknown
        } else if labels.iter().all(|y| *y == 0.0 || *y == 1.0) {
            LabelKind::Binary
        } else if labels.iter().all(|y| *y >= 0.0 && y.fract() == 0.0) {
            LabelKind::Categorical
        } else {
            LabelKind::Real
        };
        Self { label_kind, variant_labeled }
    }
}

/// Rule table, first match wins:
///
/// | condition | task |
/// |---|---|
/// | a metric is delayed and cumulative-discounted | OfflineRL |
/// | rows are A/B-variant labeled | HTE |
/// | multiclass decision | ContextualBandit |
/// | binary labels with a binary or ranking decision | BinaryClassification |
/// | real labels | Regression |
///
/// Variant labels together with a delayed cumulative metric, and inputs no
/// rule covers, are ambiguous. A task hint must agree with the table, except
/// that `MulticlassValue` may refine `ContextualBandit`.
pub fn infer_task(spec: &ValidatedSpec, diag: &LabelDiagnostics) -> Result<TaskKind, AutoconfError> {
    let delayed = spec.metrics.iter().any(|m| m.timing == MetricTiming::Delayed && m.aggregation == Aggregation::CumulativeDiscounted);
    let inferred = if delayed {
        if diag.variant_labeled {
            return Err(AutoconfError::AmbiguousTask("experiment variants with a delayed cumulative metric".into()));
        }
        TaskKind::OfflineRL
    } else if diag.variant_labeled {
        TaskKind::Hte
    } else if spec.decision_space.kind == DecisionKind::Multiclass {
        TaskKind::ContextualBandit
    } else {
        match diag.label_kind {
            LabelKind::Binary => TaskKind::BinaryClassification,
            LabelKind::Real => TaskKind::Regression,
            k => return Err(AutoconfError::AmbiguousTask(format!("{k:?} labels with a {:?} decision", spec.decision_space.kind))),
        }
    };
    match spec.task_hint {
        None => Ok(inferred),
        Some(h) if h == inferred => Ok(inferred),
        Some(TaskKind::MulticlassValue) if inferred == TaskKind::ContextualBandit => Ok(TaskKind::MulticlassValue),
        Some(h) => Err(AutoconfError::AmbiguousTask(format!("hint {h:?} conflicts with inferred {inferred:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureColumn, FeatureSchema};
    use crate::usecase::{DecisionSpace, Direction, ProductMetricSpec, UseCaseSpec};

    fn spec(decision: DecisionSpace, metric: ProductMetricSpec, hint: Option<TaskKind>) -> ValidatedSpec {
        ValidatedSpec::assume_valid(UseCaseSpec {
            id: "uc".into(),
            decision_space: decision,
            metrics: vec![metric],
            features: FeatureSchema::new(vec![FeatureColumn::numeric("x1", true)]),
            task_hint: hint,
            join_window: 3600,
            retention: 35,
            exploration_epsilon: 0.0,
            sim_env: None,
        })
    }

    fn diag(kind: LabelKind, variants: bool) -> LabelDiagnostics {
        LabelDiagnostics { label_kind: kind, variant_labeled: variants }
    }

    #[test]
    fn canonical_specs() {
        let imm = ProductMetricSpec::immediate("m", Direction::Maximize);
        let bin = DecisionSpace::binary("no", "yes");
        assert_eq!(infer_task(&spec(bin.clone(), imm.clone(), None), &diag(LabelKind::Binary, false)).unwrap(), TaskKind::BinaryClassification);
        assert_eq!(infer_task(&spec(bin.clone(), imm.clone(), None), &diag(LabelKind::Real, false)).unwrap(), TaskKind::Regression);
        assert_eq!(infer_task(&spec(DecisionSpace::binary("control", "treatment"), imm.clone(), None), &diag(LabelKind::Real, true)).unwrap(), TaskKind::Hte);
        let delayed = ProductMetricSpec::delayed_cumulative("m", Direction::Maximize);
        assert_eq!(infer_task(&spec(DecisionSpace::multiclass(&["a", "b", "c"]), delayed, None), &diag(LabelKind::Real, false)).unwrap(), TaskKind::OfflineRL);
        assert_eq!(infer_task(&spec(DecisionSpace::multiclass(&["a", "b", "c"]), imm, None), &diag(LabelKind::Binary, false)).unwrap(), TaskKind::ContextualBandit);
    }

    #[test]
    fn conflicts_are_returned_not_guessed() {
        let imm = ProductMetricSpec::immediate("m", Direction::Maximize);
        let bin = DecisionSpace::binary("no", "yes");
        let delayed = ProductMetricSpec::delayed_cumulative("m", Direction::Maximize);
        assert!(matches!(infer_task(&spec(bin.clone(), delayed, None), &diag(LabelKind::Real, true)), Err(AutoconfError::AmbiguousTask(_))));
        assert!(matches!(infer_task(&spec(bin.clone(), imm.clone(), None), &diag(LabelKind::Categorical, false)), Err(AutoconfError::AmbiguousTask(_))));
        assert!(matches!(infer_task(&spec(bin.clone(), imm.clone(), Some(TaskKind::Regression)), &diag(LabelKind::Binary, false)), Err(AutoconfError::AmbiguousTask(_))));
        let multi = DecisionSpace::multiclass(&["a", "b", "c"]);
        assert_eq!(infer_task(&spec(multi, imm, Some(TaskKind::MulticlassValue)), &diag(LabelKind::Real, false)).unwrap(), TaskKind::MulticlassValue);
    }

    #[test]
    fn label_diagnostics() {
        assert_eq!(LabelDiagnostics::from_labels(&[0.0, 1.0, 1.0], false).label_kind, LabelKind::Binary);
        assert_eq!(LabelDiagnostics::from_labels(&[0.0, 2.0, 1.0], false).label_kind, LabelKind::Categorical);
        assert_eq!(LabelDiagnostics::from_labels(&[0.5, 1.0], false).label_kind, LabelKind::Real);
        assert_eq!(LabelDiagnostics::from_labels(&[], false).label_kind, LabelKind::Unknown);
    }
}
