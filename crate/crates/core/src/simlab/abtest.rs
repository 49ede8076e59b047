use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{simulate_cohort, EnvSpec, SimError, SimPolicy, Trace};
use crate::rng::derive_seed;

pub const ALPHA: f64 = 0.05;
const MIN_ARM: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTest {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ABTestResult {
    pub n_per_arm: usize,
    pub alpha: f64,
    pub metrics: Vec<MetricTest>,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided Welch t-test of `mean(a) - mean(b)`. Returns `(t, p)`.
pub fn welch_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    let diff = ma - mb;
    if se2 <= 0.0 {
        return if diff == 0.0 { (0.0, 1.0) } else { (diff.signum() * f64::INFINITY, 0.0) };
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (t, (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

/// Per-unit outcomes: the single decision's outcome for context
/// environments, the discounted episode return for MDPs.
fn unit_outcomes(tr: &Trace, gamma: Option<f64>) -> Vec<Vec<f64>> {
    let mut per: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &tr.rows {
        let acc = per.entry(r.unit_id.as_str()).or_insert_with(|| vec![0.0; r.outcomes.len()]);
        let d = gamma.map_or(1.0, |g| g.powi(r.step as i32));
        for (a, o) in acc.iter_mut().zip(&r.outcomes) {
            *a += d * o;
        }
    }
    let m = tr.metrics.len();
    (0..m).map(|j| per.values().map(|v| v[j]).collect()).collect()
}

/// Simulates two independent cohorts of `n_per_arm` units and runs a
/// Welch test per metric.
pub fn run_ab_test(env: &EnvSpec, policy_a: SimPolicy, policy_b: SimPolicy, n_per_arm: usize, t: f64, seed: u64) -> Result<ABTestResult, SimError> {
    if n_per_arm < MIN_ARM {
        return Err(SimError::TooSmallArms { have: n_per_arm, need: MIN_ARM });
    }
    let gamma = env.mdp().map(|m| m.gamma);
    let ta = simulate_cohort(env, policy_a, n_per_arm, t, derive_seed(seed, 0))?;
    let tb = simulate_cohort(env, policy_b, n_per_arm, t, derive_seed(seed, 1))?;
    let (oa, ob) = (unit_outcomes(&ta, gamma), unit_outcomes(&tb, gamma));
    let metrics = ta
        .metrics
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let (mean_a, var_a) = mean_var(&oa[j]);
            let (mean_b, var_b) = mean_var(&ob[j]);
            let (t_stat, p_value) = welch_test(&oa[j], &ob[j]);
            MetricTest { metric: name.clone(), mean_a, mean_b, var_a, var_b, t_stat, p_value, significant: p_value < ALPHA }
        })
        .collect();
    Ok(ABTestResult { n_per_arm, alpha: ALPHA, metrics })
}

#[cfg(test)]
mod tests {
    use super::super::preset;
    use super::*;

    #[test]
    fn welch_matches_hand_computation() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0, 10.0];
        let (t, p) = welch_test(&a, &b);
        // Reference values from an independent Welch implementation.
        assert!((t + 2.2514363231593695).abs() < 1e-12);
        assert!((p - 0.06913359319239236).abs() < 1e-9, "{p}");
    }

    #[test]
    fn welch_is_antisymmetric() {
        let a = [0.3, 1.2, -0.4, 2.2, 0.9];
        let b = [1.1, 0.1, 0.5, 0.0];
        let (t1, p1) = welch_test(&a, &b);
        let (t2, p2) = welch_test(&b, &a);
        assert_eq!(t1, -t2);
        assert!((p1 - p2).abs() < 1e-15);
    }

    #[test]
    fn constant_outcomes_are_handled() {
        assert_eq!(welch_test(&[1.0; 5], &[1.0; 5]), (0.0, 1.0));
        let (t, p) = welch_test(&[2.0; 5], &[1.0; 5]);
        assert_eq!((t, p), (f64::INFINITY, 0.0));
    }

    #[test]
    fn arms_below_minimum_are_rejected() {
        let env = preset("bandit-drift").unwrap();
        let pi = |_: &[f64]| vec![1.0, 0.0, 0.0];
        let r = run_ab_test(&env, SimPolicy::Context(&pi), SimPolicy::Context(&pi), 29, 0.0, 0);
        assert_eq!(r, Err(SimError::TooSmallArms { have: 29, need: 30 }));
    }

    #[test]
    fn identical_policies_rarely_reject() {
        let env = preset("bandit-drift").unwrap();
        let pi = |_: &[f64]| vec![1.0 / 3.0; 3];
        let rejections = (0..50).filter(|s| run_ab_test(&env, SimPolicy::Context(&pi), SimPolicy::Context(&pi), 200, 0.0, *s).unwrap().metrics[0].significant).count();
        assert!(rejections <= 5, "{rejections} of 50");
    }

    #[test]
    fn clear_difference_is_detected() {
        let env = preset("bandit-drift").unwrap();
        let a = |_: &[f64]| vec![1.0, 0.0, 0.0];
        let c = |_: &[f64]| vec![0.0, 0.0, 1.0];
        let hits = (0..50).filter(|s| run_ab_test(&env, SimPolicy::Context(&c), SimPolicy::Context(&a), 500, 0.0, *s).unwrap().metrics[0].significant).count();
        assert!(hits >= 48, "{hits} of 50");
    }

    /// Two constant arms 0.05 apart under N(0, 0.5^2) noise. At 2000 units
    /// per arm the Welch test has power 1 - Phi(1.96 - 3.162) + Phi(-1.96 - 3.162) = 0.885.
    #[test]
    fn power_matches_normal_approximation() {
        let env: EnvSpec = serde_json::from_value(serde_json::json!({
            "name": "lift", "version": 1, "noise": 0.5,
            "env": {
                "kind": "bandit", "dim": 1, "link": "identity", "context_mean": [0.0], "context_sd": 0.0, "anchor": [0.0],
                "metrics": [{ "name": "m", "direction": "maximize" }],
                "arms": [{ "name": "base", "weights": [[0.0]], "bias": [0.0] }, { "name": "lift", "weights": [[0.0]], "bias": [0.05] }]
            }
        }))
        .unwrap();
        let a = |_: &[f64]| vec![0.0, 1.0];
        let b = |_: &[f64]| vec![1.0, 0.0];
        let seeds = 400;
        let hits = (0..seeds).filter(|s| run_ab_test(&env, SimPolicy::Context(&a), SimPolicy::Context(&b), 2000, 0.0, *s).unwrap().metrics[0].significant).count();
        let rate = hits as f64 / seeds as f64;
        let se = (0.885f64 * 0.115 / seeds as f64).sqrt();
        assert!((rate - 0.885).abs() < 3.0 * se, "power {rate}");
    }

    #[test]
    fn mdp_arms_use_discounted_returns() {
        let env = preset("chain-mdp-2metric").unwrap();
        let hold = |_: &crate::rl::State| vec![1.0, 0.0, 0.0];
        let boost = |_: &crate::rl::State| vec![0.0, 0.0, 1.0];
        let r = run_ab_test(&env, SimPolicy::State(&boost), SimPolicy::State(&hold), 300, 0.0, 3).unwrap();
        assert!(r.metrics[0].significant && r.metrics[0].t_stat > 0.0);
        assert_eq!(r.metrics[1].metric, "cost");
    }
}
