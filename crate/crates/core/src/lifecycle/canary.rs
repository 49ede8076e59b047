use serde::{Deserialize, Serialize};

use super::{rebuild, AlertKind, AlertLog, ChampionRecord, Evidence, LifecycleError, Manifest, ModelBundle, RecordReason, Registry};
use crate::eventlog::DatasetSnapshot;
use crate::offeval::{doubly_robust, ActionMeans, LoggedBanditDataset, LoggedRow, PolicyEvaluation};
use crate::policy::ModelOutputs;
use crate::usecase::ProductMetricSpec;

/// Challenger loss may exceed the champion's by at most this factor.
pub const LOSS_TOLERANCE: f64 = 1.02;
const Z95: f64 = 1.959963984540054;

pub struct CanaryInput<'a> {
    pub champion: &'a Manifest,
    pub champion_data: &'a DatasetSnapshot,
    pub challenger: &'a Manifest,
    pub challenger_data: &'a DatasetSnapshot,
    /// Held-out labeled rows for the loss gate.
    pub validation: &'a DatasetSnapshot,
    /// Logged decisions with propensities for the counterfactual gate.
    pub logged: &'a DatasetSnapshot,
    pub metrics: &'a [ProductMetricSpec],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Promote,
    Reject,
}

/// Counterfactual comparison on one metric, direction-adjusted so larger is
/// better. Intervals are normal 95%.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub champion: f64,
    pub champion_half_width: f64,
    pub challenger: f64,
    pub challenger_lo: f64,
    pub challenger_hi: f64,
    pub delta: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryReport {
    pub champion: String,
    pub challenger: String,
    pub champion_loss: f64,
    pub challenger_loss: f64,
    /// `challenger_loss / champion_loss - 1`.
    pub loss_delta: f64,
    pub loss_gate: bool,
    pub metrics: Vec<MetricDelta>,
    pub metric_gate: bool,
    pub verdict: Verdict,
    pub reasons: Vec<String>,
}

/// Logged rows keyed by row index; contexts are encoded separately per
/// manifest since each carries its own plan.
fn logged_dataset(snapshot: &DatasetSnapshot, actions: &[String], metrics: &[ProductMetricSpec]) -> Result<LoggedBanditDataset, LifecycleError> {
    let rows = snapshot
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let action = actions.iter().position(|a| a == &r.action).ok_or_else(|| LifecycleError::UnknownAction(r.action.clone()))?;
            let rewards = metrics
                .iter()
                .map(|m| r.metric_values.get(&m.name).copied().ok_or_else(|| LifecycleError::MissingLabel { decision_id: r.decision_id.clone(), metric: m.name.clone() }))
                .collect::<Result<_, _>>()?;
            Ok(LoggedRow { x: vec![i as f64], action, propensity: r.propensity, rewards })
        })
        .collect::<Result<_, LifecycleError>>()?;
    Ok(LoggedBanditDataset { n_actions: actions.len(), metrics: metrics.iter().map(|m| m.name.clone()).collect(), rows })
}

fn evaluate_manifest(m: &Manifest, bundle: &ModelBundle, snapshot: &DatasetSnapshot, data: &LoggedBanditDataset, q: &ActionMeans) -> Result<PolicyEvaluation, LifecycleError> {
    let outputs: Vec<ModelOutputs> = snapshot.rows.iter().map(|r| bundle.outputs(&m.plan.apply(&r.features, snapshot.schema_version)?)).collect::<Result<_, _>>()?;
    let probs: Vec<Vec<f64>> = outputs.iter().map(|o| m.policy.action_probs(o)).collect::<Result<_, _>>()?;
    let pi = |x: &[f64]| probs[x[0] as usize].clone();
    Ok(doubly_robust(data, &pi, q)?)
}

/// Doubly robust estimate of the manifest's policy on logged decisions, in
/// raw metric units, with per-action mean outcomes as the reward model.
pub fn counterfactual_estimate(m: &Manifest, bundle: &ModelBundle, logged: &DatasetSnapshot, metrics: &[ProductMetricSpec]) -> Result<PolicyEvaluation, LifecycleError> {
    let data = logged_dataset(logged, &m.actions, metrics)?;
    evaluate_manifest(m, bundle, logged, &data, &ActionMeans::fit(&data))
}

/// Champion/challenger comparison. Both manifests are rebuilt from their
/// snapshots first; a digest mismatch aborts. Gate 1 bounds the offline loss
/// ratio by [`LOSS_TOLERANCE`]; gate 2 requires, per metric, the
/// challenger's lower 95% bound to be at least the champion's estimate minus
/// the champion's half-width.
pub fn canary(input: &CanaryInput) -> Result<CanaryReport, LifecycleError> {
    let champ = rebuild(input.champion, input.champion_data)?;
    let chall = rebuild(input.challenger, input.challenger_data)?;
    if input.champion.actions != input.challenger.actions {
        return Err(LifecycleError::ActionMismatch);
    }
    let champion_loss = champ.loss(input.champion, input.validation)?;
    let challenger_loss = chall.loss(input.challenger, input.validation)?;
    let loss_gate = challenger_loss <= champion_loss * LOSS_TOLERANCE;
    let mut reasons = Vec::new();
    if !loss_gate {
        reasons.push(format!("loss gate: challenger loss {challenger_loss:.6} exceeds {LOSS_TOLERANCE} x champion loss {champion_loss:.6}"));
    }

    let data = logged_dataset(input.logged, &input.champion.actions, input.metrics)?;
    let q = ActionMeans::fit(&data);
    let ce = evaluate_manifest(input.champion, &champ, input.logged, &data, &q)?;
    let xe = evaluate_manifest(input.challenger, &chall, input.logged, &data, &q)?;
    let metrics: Vec<MetricDelta> = input
        .metrics
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let s = spec.direction.sign();
            let (champion, challenger) = (s * ce.estimate[j], s * xe.estimate[j]);
            let (hw_c, hw_x) = (Z95 * ce.std_error[j], Z95 * xe.std_error[j]);
            let passed = challenger - hw_x >= champion - hw_c;
            MetricDelta { metric: spec.name.clone(), champion, champion_half_width: hw_c, challenger, challenger_lo: challenger - hw_x, challenger_hi: challenger + hw_x, delta: challenger - champion, passed }
        })
        .collect();
    for d in metrics.iter().filter(|d| !d.passed) {
        reasons.push(format!("metric gate: `{}` lower bound {:.6} below champion {:.6} minus half-width {:.6}", d.metric, d.challenger_lo, d.champion, d.champion_half_width));
    }
    let metric_gate = metrics.iter().all(|d| d.passed);
    Ok(CanaryReport {
        champion: input.champion.id.clone(),
        challenger: input.challenger.id.clone(),
        champion_loss,
        challenger_loss,
        loss_delta: challenger_loss / champion_loss - 1.0,
        loss_gate,
        metrics,
        metric_gate,
        verdict: if loss_gate && metric_gate { Verdict::Promote } else { Verdict::Reject },
        reasons,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PromotionResult {
    Promoted { record: ChampionRecord },
    Rejected { alert: String },
}

/// Applies a canary verdict. Promotion requires the report to be against the
/// current champion and the challenger to be registered; rejection leaves
/// the head alone and raises a canary-reject alert.
pub fn promote_or_rollback(report: &CanaryReport, registry: &mut Registry, alerts: &mut AlertLog, now: i64) -> Result<PromotionResult, LifecycleError> {
    let head = registry.head().map(|r| r.manifest.clone());
    if head.as_deref() != Some(report.champion.as_str()) {
        return Err(LifecycleError::StaleReport { report: report.champion.clone(), head });
    }
    match report.verdict {
        Verdict::Promote => Ok(PromotionResult::Promoted { record: registry.promote(&report.challenger, now, RecordReason::Promote)? }),
        Verdict::Reject => {
            let ev = Evidence::new(format!("canary/{}/{}", report.champion, report.challenger)).with("loss_delta", report.loss_delta).with("loss_gate", f64::from(u8::from(report.loss_gate))).with("metric_gate", f64::from(u8::from(report.metric_gate)));
            Ok(PromotionResult::Rejected { alert: alerts.raise(AlertKind::CanaryReject, ev, now) })
        }
    }
}
