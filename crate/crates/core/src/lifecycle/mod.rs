//! Model freshness and safety: drift- and age-triggered retraining,
//! reproducibility manifests, champion/challenger canaries, a champion
//! registry with rollback, and deduplicated alerts.

mod alerts;
mod canary;
mod manifest;
mod registry;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use alerts::{check_missing_features, check_output_anomaly, missing_feature_rate, Alert, AlertKind, AlertLog, Evidence, Severity, DEDUP_WINDOW_SECS, MISSING_RATE_THRESHOLD, MISSING_WINDOW};
pub use canary::{canary, counterfactual_estimate, promote_or_rollback, CanaryInput, CanaryReport, MetricDelta, PromotionResult, Verdict, LOSS_TOLERANCE};
pub use manifest::{rebuild, snapshot_transitions, train_from_manifest, Manifest, ManifestDraft, ModelBundle, ModelLayout, ModelSpec};
pub use registry::{ChampionRecord, RecordReason, Registry, REGISTRY_FORMAT};

use crate::features::{FeatureSchema, FeatureVector};
use crate::models::ModelError;
use crate::offeval::OffEvalError;
use crate::policy::PolicyError;
use crate::prep::{drift_report, DriftReport, PlanError, DEFAULT_PSI_THRESHOLD};
use crate::rl::RlError;

/// Retrain schedule when no drift is seen.
pub const DEFAULT_MAX_AGE_SECS: i64 = 7 * 86_400;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LifecycleError {
    #[error("snapshot {got} is not the manifest's dataset {expected}")]
    DatasetMismatch { expected: String, got: String },
    #[error("manifest {manifest} rebuilt to digest {got}, sealed as {expected}")]
    ManifestUnreproducible { manifest: String, expected: String, got: String },
    #[error("no parent champion to roll back to")]
    NoParent,
    #[error("unknown manifest `{0}`")]
    UnknownManifest(String),
    #[error("canary report is against {report}, current champion is {head:?}")]
    StaleReport { report: String, head: Option<String> },
    #[error("row `{decision_id}` has no value for metric `{metric}`")]
    MissingLabel { decision_id: String, metric: String },
    #[error("action `{0}` is not in the manifest's decision space")]
    UnknownAction(String),
    #[error("champion and challenger have different decision spaces")]
    ActionMismatch,
    #[error("snapshot has no usable rows")]
    EmptySnapshot,
    #[error("Q-function manifests have no supervised loss to compare")]
    NoSupervisedLoss,
    #[error("storage: {0}")]
    Io(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    OffEval(#[from] OffEvalError),
    #[error(transparent)]
    Rl(#[from] RlError),
}

impl From<std::io::Error> for LifecycleError {
    fn from(e: std::io::Error) -> Self {
        LifecycleError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreshnessConfig {
    pub max_age_secs: i64,
    pub psi_threshold: f64,
}

impl Default for FreshnessConfig {
    fn default() -> Self {
        Self { max_age_secs: DEFAULT_MAX_AGE_SECS, psi_threshold: DEFAULT_PSI_THRESHOLD }
    }
}

/// Feature window the serving champion was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceWindow {
    pub manifest: String,
    pub trained_at: i64,
    pub features: Vec<FeatureVector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreshnessAction {
    None,
    Retrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainTrigger {
    Drift,
    Stale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreshnessReport {
    pub action: FreshnessAction,
    pub triggers: Vec<RetrainTrigger>,
    pub drift: DriftReport,
    pub age_secs: i64,
    pub alert: Option<String>,
}

/// Compares recent traffic with the champion's reference window. Retrains
/// when any column's PSI exceeds the threshold or the champion is older than
/// the schedule; drift also raises an alert carrying the per-column PSI.
pub fn evaluate_freshness(reference: &ReferenceWindow, current: &[FeatureVector], schema: &FeatureSchema, now: i64, cfg: &FreshnessConfig, alerts: &mut AlertLog) -> FreshnessReport {
    let drift = drift_report(&reference.features, current, schema, cfg.psi_threshold);
    let age_secs = now - reference.trained_at;
    let mut triggers = Vec::new();
    let mut alert = None;
    if drift.alert {
        triggers.push(RetrainTrigger::Drift);
        let ev = drift.columns.iter().fold(Evidence::new(format!("drift/{}", reference.manifest)).with("max_psi", drift.overall_max_psi), |e, c| e.with(&format!("psi.{}", c.name), c.psi));
        alert = Some(alerts.raise(AlertKind::Drift, ev, now));
    }
    if age_secs > cfg.max_age_secs {
        triggers.push(RetrainTrigger::Stale);
    }
    let action = if triggers.is_empty() { FreshnessAction::None } else { FreshnessAction::Retrain };
    FreshnessReport { action, triggers, drift, age_secs, alert }
}
