use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::features::FeatureVector;
use crate::prep::{compute_psi, PsiError, DEFAULT_PSI_THRESHOLD};

/// Repeats of the same (kind, evidence reference) inside this window reuse
/// the open alert.
pub const DEDUP_WINDOW_SECS: i64 = 3600;
/// Decisions inspected by the missing-feature rule.
pub const MISSING_WINDOW: usize = 1000;
pub const MISSING_RATE_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlertKind {
    Drift,
    DataMissing,
    OutputAnomaly,
    CanaryReject,
}

impl AlertKind {
    pub fn severity(self) -> Severity {
        match self {
            AlertKind::Drift | AlertKind::OutputAnomaly => Severity::Warning,
            AlertKind::DataMissing => Severity::Critical,
            AlertKind::CanaryReject => Severity::Info,
        }
    }
}

/// Machine-readable evidence: a stable reference (a report, manifest or
/// window id) plus the numbers that crossed the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub reference: String,
    pub values: BTreeMap<String, f64>,
}

impl Evidence {
    pub fn new(reference: impl Into<String>) -> Self {
        Self { reference: reference.into(), values: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.values.insert(key.to_string(), value);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub id: String,
    pub kind: AlertKind,
    pub severity: Severity,
    pub evidence: Evidence,
    pub raised_at: i64,
    pub last_seen: i64,
    /// Occurrences folded into this alert, including the first.
    pub count: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlertLog {
    pub alerts: Vec<Alert>,
}

impl AlertLog {
    /// Records an alert and returns its id. A repeat of an alert raised less
    /// than [`DEDUP_WINDOW_SECS`] ago returns the earlier id.
    pub fn raise(&mut self, kind: AlertKind, evidence: Evidence, now: i64) -> String {
        if let Some(a) = self.alerts.iter_mut().rev().find(|a| a.kind == kind && a.evidence.reference == evidence.reference && now - a.raised_at < DEDUP_WINDOW_SECS) {
            a.last_seen = a.last_seen.max(now);
            a.count += 1;
            return a.id.clone();
        }
        let id = format!("alert-{:06}", self.alerts.len() + 1);
        self.alerts.push(Alert { id: id.clone(), kind, severity: kind.severity(), evidence, raised_at: now, last_seen: now, count: 1 });
        id
    }

    pub fn get(&self, id: &str) -> Option<&Alert> {
        self.alerts.iter().find(|a| a.id == id)
    }

    /// Alerts raised at or after `since`, newest last.
    pub fn since(&self, since: i64) -> impl Iterator<Item = &Alert> {
        self.alerts.iter().filter(move |a| a.last_seen >= since)
    }
}

/// Fraction of the last [`MISSING_WINDOW`] decisions with at least one
/// missing feature. `None` until that many decisions exist.
pub fn missing_feature_rate(decisions: &[FeatureVector]) -> Option<f64> {
    if decisions.len() < MISSING_WINDOW {
        return None;
    }
    let window = &decisions[decisions.len() - MISSING_WINDOW..];
    let missing = window.iter().filter(|fv| fv.iter().any(|(_, v)| v.is_missing())).count();
    Some(missing as f64 / MISSING_WINDOW as f64)
}

/// Raises a data-missing alert when the missing-feature rate exceeds
/// [`MISSING_RATE_THRESHOLD`].
pub fn check_missing_features(log: &mut AlertLog, reference: &str, decisions: &[FeatureVector], now: i64) -> Option<String> {
    let rate = missing_feature_rate(decisions)?;
    (rate > MISSING_RATE_THRESHOLD).then(|| log.raise(AlertKind::DataMissing, Evidence::new(reference).with("missing_rate", rate).with("window", MISSING_WINDOW as f64), now))
}

/// Raises an output-anomaly alert when the PSI of current model outputs
/// against the champion's reference window exceeds the drift threshold.
pub fn check_output_anomaly(log: &mut AlertLog, reference: &str, champion_window: &[f64], current: &[f64], now: i64) -> Result<Option<String>, PsiError> {
    let psi = compute_psi(champion_window, current)?;
    Ok((psi > DEFAULT_PSI_THRESHOLD).then(|| log.raise(AlertKind::OutputAnomaly, Evidence::new(reference).with("psi", psi), now)))
}
