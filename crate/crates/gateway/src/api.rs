//! Request and response bodies of the HTTP/JSON surface.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use selfserve_core::autoconf::Leaderboard;
use selfserve_core::features::{FeatureColumn, FeatureSchema, FeatureVector};
use selfserve_core::hte::SegmentReport;
use selfserve_core::lifecycle::{Alert, CanaryReport, ChampionRecord, FreshnessReport};
use selfserve_core::tuning::Hypervolume;
use selfserve_core::usecase::{TaskKind, UseCaseSpec};

/// Columns offered to new use cases when absent from their schema.
pub fn base_feature_preset() -> Vec<FeatureColumn> {
    vec![
        FeatureColumn::numeric("tenure_days", false),
        FeatureColumn::numeric("sessions_7d", false),
        FeatureColumn::numeric("actions_28d", false),
        FeatureColumn::numeric("hour_of_day", false),
        FeatureColumn::categorical("platform", false),
        FeatureColumn::categorical("country", false),
    ]
}

pub fn recommended_features(schema: &FeatureSchema) -> Vec<FeatureColumn> {
    base_feature_preset().into_iter().filter(|c| schema.column(&c.name).is_none()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnboardResponse {
    pub id: String,
    pub recommended_features: Vec<FeatureColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UseCaseView {
    pub spec: UseCaseSpec,
    pub champion: Option<ChampionRecord>,
    pub policy_version: Option<String>,
    pub predictions: usize,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecideRequest {
    pub unit_id: String,
    pub features: FeatureVector,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub timestamp: Option<i64>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecideResponse {
    pub decision_id: String,
    pub action: String,
    pub propensity: f64,
    pub policy_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserveRequest {
    pub decision_id: String,
    pub metric_values: BTreeMap<String, f64>,
    #[serde(default)]
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserveResponse {
    pub decision_id: String,
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployRequest {
    pub candidate: String,
    /// Deploys without a passing canary; recorded in the audit log.
    #[serde(default)]
    pub override_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployResponse {
    pub record: ChampionRecord,
    pub policy_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Train,
    TuneReward,
    TunePolicy,
}

/// One metric estimate in raw metric units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub metric: String,
    /// "dr", "fqe" or "ab".
    pub estimator: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub manifest_id: String,
    pub source: CandidateSource,
    pub job: String,
    pub task: TaskKind,
    pub train_snapshot: String,
    pub validation_snapshot: String,
    pub estimates: Vec<MetricEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nondominated: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segments: Option<SegmentReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leaderboard: Option<Leaderboard>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub canary: Option<CanaryReport>,
    pub created_at: i64,
}

/// A reward-tuning trial as shown next to the front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontPoint {
    pub trial: usize,
    pub weights: Vec<f64>,
    /// Direction-adjusted values.
    pub values: Vec<f64>,
    pub raw_values: Vec<f64>,
    pub nondominated: bool,
    pub candidate: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardFrontView {
    pub job: String,
    pub metrics: Vec<String>,
    pub points: Vec<FrontPoint>,
    pub reference: Vec<f64>,
    pub hypervolume: Hypervolume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatesView {
    pub use_case: String,
    pub champion: Option<String>,
    pub candidates: Vec<Candidate>,
    pub fronts: Vec<RewardFrontView>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiPoint {
    pub at: i64,
    pub max_psi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub use_case: String,
    pub champion: Option<ChampionRecord>,
    /// Decisions by the champion inside the health window.
    pub recent_decisions: usize,
    pub freshness: Option<FreshnessReport>,
    pub missing_feature_rate: Option<f64>,
    pub output_psi: Option<f64>,
    pub psi_timeline: Vec<PsiPoint>,
    pub alerts: Vec<Alert>,
}
