use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{quantile_sorted, sorted_copy};
use crate::features::{FeatureKind, FeatureSchema, FeatureValue, FeatureVector};

/// Reference-quantile bins per numeric column.
pub const PSI_BINS: usize = 10;
/// Floor applied to bin fractions before taking logs.
pub const PSI_EPSILON: f64 = 1e-6;
/// PSI above which a drift alert fires.
pub const DEFAULT_PSI_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PsiError {
    #[error("empty sample")]
    EmptySample,
}

/// Population stability index of `current` against `reference`.
///
/// Bins are cut at the reference deciles (duplicate edges collapse, giving
/// fewer bins for discrete data). Each bin contributes
/// `(p - q) * ln(p / q)` with both fractions floored at [`PSI_EPSILON`].
pub fn compute_psi(reference: &[f64], current: &[f64]) -> Result<f64, PsiError> {
    if reference.is_empty() || current.is_empty() {
        return Err(PsiError::EmptySample);
    }
    let sorted = sorted_copy(reference);
    let mut edges: Vec<f64> = (1..PSI_BINS).map(|k| quantile_sorted(&sorted, k as f64 / PSI_BINS as f64)).collect();
    edges.dedup();
    let p = bin_fractions(reference, &edges);
    let q = bin_fractions(current, &edges);
    Ok(psi_from_fractions(&p, &q))
}

fn bin_fractions(sample: &[f64], edges: &[f64]) -> Vec<f64> {
    let mut counts = vec![0usize; edges.len() + 1];
    for &x in sample {
        counts[edges.partition_point(|e| *e < x)] += 1;
    }
    let n = sample.len() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

fn psi_from_fractions(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&p, &q)| {
            let (p, q) = (p.max(PSI_EPSILON), q.max(PSI_EPSILON));
            (p - q) * (p / q).ln()
        })
        .sum()
}

/// PSI over category frequencies; missing values form their own category.
fn categorical_psi(reference: &[Option<&str>], current: &[Option<&str>]) -> f64 {
    let mut keys: BTreeMap<Option<&str>, (f64, f64)> = BTreeMap::new();
    for r in reference {
        keys.entry(*r).or_default().0 += 1.0 / reference.len() as f64;
    }
    for c in current {
        keys.entry(*c).or_default().1 += 1.0 / current.len() as f64;
    }
    let (p, q): (Vec<f64>, Vec<f64>) = keys.values().copied().unzip();
    psi_from_fractions(&p, &q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnPsi {
    pub name: String,
    pub psi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub columns: Vec<ColumnPsi>,
    pub overall_max_psi: f64,
    pub bins: usize,
    pub threshold: f64,
    pub alert: bool,
}

impl DriftReport {
    pub fn from_columns(columns: Vec<ColumnPsi>, threshold: f64) -> Self {
        let overall_max_psi = columns.iter().map(|c| c.psi).fold(0.0, f64::max);
        Self { columns, overall_max_psi, bins: PSI_BINS, threshold, alert: overall_max_psi > threshold }
    }
}

/// Per-column PSI between two windows of canonical feature vectors. Numeric
/// columns skip missing values; a column with no values in either window is
/// left out of the report.
pub fn drift_report(reference: &[FeatureVector], current: &[FeatureVector], schema: &FeatureSchema, threshold: f64) -> DriftReport {
    let mut cols = Vec::new();
    for col in &schema.columns {
        let psi = match col.kind {
            FeatureKind::Numeric => {
                let nums = |rows: &[FeatureVector]| -> Vec<f64> { rows.iter().filter_map(|r| r.get(&col.name).and_then(FeatureValue::as_num)).collect() };
                compute_psi(&nums(reference), &nums(current)).ok()
            }
            FeatureKind::Categorical => {
                let cats = |rows: &'_ [FeatureVector]| -> Vec<Option<String>> { rows.iter().map(|r| r.get(&col.name).and_then(|v| v.as_cat().map(str::to_string))).collect() };
                let (r, c) = (cats(reference), cats(current));
                if r.is_empty() || c.is_empty() {
                    None
                } else {
                    let r: Vec<Option<&str>> = r.iter().map(|v| v.as_deref()).collect();
                    let c: Vec<Option<&str>> = c.iter().map(|v| v.as_deref()).collect();
                    Some(categorical_psi(&r, &c))
                }
            }
        };
        if let Some(psi) = psi {
            cols.push(ColumnPsi { name: col.name.clone(), psi });
        }
    }
    DriftReport::from_columns(cols, threshold)
}
