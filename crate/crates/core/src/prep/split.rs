use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eventlog::{DatasetSnapshot, JoinedExample};
use crate::rng::{permutation, seeded};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitError {
    #[error("split ratios {0:?} must be nonnegative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("need at least {need} units, have {have}")]
    TooFewUnits { have: usize, need: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Unit-disjoint train/validation/test split of a snapshot.
pub fn split(snapshot: &DatasetSnapshot, ratios: [f64; 3], seed: u64) -> Result<Split<JoinedExample>, SplitError> {
    split_by_unit(&snapshot.rows, |r| r.unit_id.as_str(), ratios, seed)
}

/// Splits items so that every unit lands in exactly one fold. Units are
/// shuffled under `seed` and cut at the cumulative ratios, so fold sizes in
/// units are within one of `ratio * n_units`.
pub fn split_by_unit<T: Clone>(items: &[T], unit_of: impl Fn(&T) -> &str, ratios: [f64; 3], seed: u64) -> Result<Split<T>, SplitError> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SplitError::BadRatios(ratios));
    }
    let units: Vec<&str> = items.iter().map(&unit_of).collect::<BTreeSet<_>>().into_iter().collect();
    let order = permutation(units.len(), &mut seeded(seed));
    let n = units.len() as f64;
    let cut1 = (ratios[0] * n).round() as usize;
    let cut2 = (((ratios[0] + ratios[1]) * n).round() as usize).max(cut1);
    let mut fold_of = BTreeMap::new();
    for (rank, &u) in order.iter().enumerate() {
        let fold = if rank < cut1 {
            0
        } else if rank < cut2 {
            1
        } else {
            2
        };
        fold_of.insert(units[u], fold);
    }
    let mut out = Split { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for item in items {
        match fold_of[unit_of(item)] {
            0 => out.train.push(item.clone()),
            1 => out.validation.push(item.clone()),
            _ => out.test.push(item.clone()),
        }
    }
    Ok(out)
}

/// Assigns each distinct unit to one of `k` folds of near-equal unit count.
pub fn unit_folds<'a>(units: impl IntoIterator<Item = &'a str>, k: usize, seed: u64) -> Result<BTreeMap<String, usize>, SplitError> {
    let units: Vec<&str> = units.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    if units.len() < k {
        return Err(SplitError::TooFewUnits { have: units.len(), need: k });
    }
    let order = permutation(units.len(), &mut seeded(seed));
    Ok(order.iter().enumerate().map(|(rank, &u)| (units[u].to_string(), rank % k)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    /// Drop majority-class rows at random.
    Downsample,
    /// Duplicate minority-class rows at random.
    Upsample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resample {
    pub mode: ResampleMode,
    /// Desired minority/majority count ratio; 1.0 is fully balanced.
    pub target_ratio: f64,
}

impl Default for Resample {
    fn default() -> Self {
        Self { mode: ResampleMode::Downsample, target_ratio: 1.0 }
    }
}

/// Class rebalancing for binary labels. Output keeps the input order of the
/// retained rows, with upsampled duplicates appended.
pub fn rebalance<T: Clone>(items: &[T], is_positive: impl Fn(&T) -> bool, cfg: Resample, seed: u64) -> Vec<T> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..items.len()).partition(|&i| is_positive(&items[i]));
    let (minority, majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    if minority.is_empty() || cfg.target_ratio <= 0.0 {
        return items.to_vec();
    }
    let mut rng = seeded(seed);
    match cfg.mode {
        ResampleMode::Downsample => {
            let keep = ((minority.len() as f64 / cfg.target_ratio).round() as usize).min(majority.len());
            let order = permutation(majority.len(), &mut rng);
            let mut kept: BTreeSet<usize> = minority.iter().copied().collect();
            kept.extend(order.iter().take(keep).map(|&j| majority[j]));
            kept.into_iter().map(|i| items[i].clone()).collect()
        }
        ResampleMode::Upsample => {
            let want = (majority.len() as f64 * cfg.target_ratio).round() as usize;
            let mut out = items.to_vec();
            for _ in minority.len()..want {
                out.push(items[minority[rng.random_range(0..minority.len())]].clone());
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn units(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("u{i}")).collect()
    }

    #[test]
    fn sizes_follow_ratios() {
        let items = units(1000);
        let s = split_by_unit(&items, |s| s.as_str(), [0.8, 0.1, 0.1], 7).unwrap();
        assert!((s.train.len() as i64 - 800).abs() <= 1);
        assert!((s.validation.len() as i64 - 100).abs() <= 1);
        assert!((s.test.len() as i64 - 100).abs() <= 1);
    }

    #[test]
    fn same_seed_same_split() {
        let items = units(300);
        let a = split_by_unit(&items, |s| s.as_str(), [0.8, 0.1, 0.1], 7).unwrap();
        let b = split_by_unit(&items, |s| s.as_str(), [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let items = units(10);
        assert!(matches!(split_by_unit(&items, |s| s.as_str(), [0.5, 0.6, 0.1], 0), Err(SplitError::BadRatios(_))));
    }

    #[test]
    fn units_never_straddle_folds() {
        let items: Vec<(String, usize)> = (0..600).map(|i| (format!("u{}", i % 97), i)).collect();
        let s = split_by_unit(&items, |(u, _)| u.as_str(), [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), items.len());
        let sets: Vec<HashSet<&str>> = [&s.train, &s.validation, &s.test].iter().map(|f| f.iter().map(|(u, _)| u.as_str()).collect()).collect();
        assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
    }

    #[test]
    fn folds_are_balanced() {
        let u = units(103);
        let folds = unit_folds(u.iter().map(String::as_str), 5, 1).unwrap();
        let mut counts = [0; 5];
        for f in folds.values() {
            counts[*f] += 1;
        }
        assert!(counts.iter().all(|&c| c == 20 || c == 21));
    }

    #[test]
    fn downsample_balances_classes() {
        let items: Vec<bool> = (0..100).map(|i| i < 10).collect();
        let out = rebalance(&items, |b| *b, Resample::default(), 4);
        assert_eq!(out.iter().filter(|b| **b).count(), 10);
        assert_eq!(out.iter().filter(|b| !**b).count(), 10);
    }

    #[test]
    fn upsample_duplicates_minority() {
        let items: Vec<bool> = (0..100).map(|i| i < 10).collect();
        let out = rebalance(&items, |b| *b, Resample { mode: ResampleMode::Upsample, target_ratio: 1.0 }, 4);
        assert_eq!(out.iter().filter(|b| **b).count(), 90);
        assert_eq!(out.len(), 180);
    }
}
