use std::ops::Range;

use super::{Dataset, ModelArtifact, ModelError};
use crate::rng::{derive_seed, permutation, seeded};

const REPEATS: u64 = 5;
const MIN_ROWS: usize = 50;

/// Permutation importance of each column group (for example the one-hot
/// block of a categorical). An empty `groups` treats every input dimension
/// as its own column named `x{i}`.
///
/// Importance is the mean metric degradation over a few shuffles, clipped
/// at zero. Sorted by importance, then name.
pub fn feature_importance(artifact: &ModelArtifact, validation: &Dataset, groups: &[(String, Range<usize>)], seed: u64) -> Result<Vec<(String, f64)>, ModelError> {
    if validation.len() < MIN_ROWS {
        return Err(ModelError::TooFewRows { have: validation.len(), need: MIN_ROWS });
    }
    let groups: Vec<(String, Range<usize>)> = if groups.is_empty() {
        (0..artifact.dim).map(|i| (format!("x{i}"), i..i + 1)).collect()
    } else {
        groups.to_vec()
    };
    let base = artifact.validation_metric(validation)?;
    let higher_is_better = base.name != "rmse";
    let mut out = Vec::with_capacity(groups.len());
    for (g, (name, range)) in groups.iter().enumerate() {
        let mut drop = 0.0;
        for r in 0..REPEATS {
            let mut rng = seeded(derive_seed(seed, (g as u64) << 8 | r));
            let perm = permutation(validation.len(), &mut rng);
            let mut shuffled = validation.clone();
            for (i, &j) in perm.iter().enumerate() {
                shuffled.x[i][range.clone()].copy_from_slice(&validation.x[j][range.clone()]);
            }
            let m = artifact.validation_metric(&shuffled)?.value;
            drop += if higher_is_better { base.value - m } else { m - base.value };
        }
        out.push((name.clone(), (drop / REPEATS as f64).max(0.0)));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}
