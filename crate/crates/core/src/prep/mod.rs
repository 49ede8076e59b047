//! Preprocessing plans, dataset splits and drift statistics.

mod drift;
mod plan;
mod split;

pub use drift::{compute_psi, drift_report, ColumnPsi, DriftReport, PsiError, DEFAULT_PSI_THRESHOLD, PSI_BINS, PSI_EPSILON};
pub use plan::{fit_plan, fit_plan_rows, ColumnRecipe, PlanError, PreprocessPlan};
pub use split::{rebalance, split, split_by_unit, unit_folds, Resample, ResampleMode, Split, SplitError};

/// Linear-interpolation quantile of sorted data, `q` in [0, 1].
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub(crate) fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}
