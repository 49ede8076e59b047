use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{hypervolume, nondominated_set, propose_config, Hypervolume, Space, TrialSource, TuningError, TuningTrial, LATTICE_SIZE};
use crate::policy::DecisionPolicy;
use crate::rl::{check_coverage, fit_fqi, fqe, greedy_policy_from_q, FqiConfig, GreedyQ, QFunction, Transition};
use crate::rng::derive_seed;
use crate::simlab::MetricDef;

/// One trained policy from a reward-weight trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardCandidate {
    pub trial: usize,
    pub weights: Vec<f64>,
    /// FQE value per metric, direction-adjusted.
    pub values: Vec<f64>,
    /// FQE value per metric in raw metric units.
    pub raw_values: Vec<f64>,
    pub nondominated: bool,
    pub policy: DecisionPolicy,
    pub q: QFunction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardFront {
    pub metrics: Vec<MetricDef>,
    pub data_digest: String,
    pub trials: Vec<TuningTrial>,
    pub candidates: Vec<RewardCandidate>,
    /// Candidate indices on the front, one per distinct value vector.
    pub front: Vec<usize>,
    /// Componentwise minimum over all candidates.
    pub reference: Vec<f64>,
    pub hypervolume: Hypervolume,
}

impl RewardFront {
    pub fn front_candidates(&self) -> impl Iterator<Item = &RewardCandidate> {
        self.front.iter().map(|&i| &self.candidates[i])
    }
}

fn digest_transitions(ts: &[Transition]) -> String {
    let mut h = Sha256::new();
    for t in ts {
        h.update(serde_json::to_vec(t).expect("transition serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Explores linear reward weights over `metrics`: each proposed weight vector
/// trains an FQI policy on the same logged transitions, and the greedy
/// policy is scored per metric by FQE. Rewards are direction-adjusted before
/// fitting, so weights always reward improvement.
pub fn tune_reward(ts: &[Transition], n_actions: usize, metrics: &[MetricDef], gamma: f64, budget: usize, seed: u64, fqi: &FqiConfig) -> Result<RewardFront, TuningError> {
    if budget < LATTICE_SIZE {
        return Err(TuningError::BudgetTooSmall { have: budget, need: LATTICE_SIZE });
    }
    let cov = check_coverage(ts, n_actions);
    if !cov.pass {
        return Err(TuningError::CoverageFailure(cov.uncovered));
    }
    let signs: Vec<f64> = metrics.iter().map(|m| m.direction.sign()).collect();
    let adjusted: Vec<Transition> = ts
        .iter()
        .map(|t| {
            if t.rewards.len() != signs.len() {
                return Err(TuningError::DimensionMismatch { expected: signs.len(), got: t.rewards.len() });
            }
            let mut t = t.clone();
            t.rewards.iter_mut().zip(&signs).for_each(|(r, s)| *r *= s);
            Ok(t)
        })
        .collect::<Result<_, _>>()?;
    let space = Space::Simplex { dim: metrics.len() };
    let mut trials: Vec<TuningTrial> = Vec::with_capacity(budget);
    let mut candidates: Vec<RewardCandidate> = Vec::with_capacity(budget);
    for id in 0..budget {
        let trial_seed = derive_seed(seed, id as u64);
        let w = propose_config(&trials, &space, seed)?;
        // Repeated weights train the identical policy.
        let cached = candidates.iter().find(|c| c.weights == w).map(|c| (c.q.clone(), c.values.clone()));
        let (q, values) = match cached {
            Some(hit) => hit,
            None => {
                let q = fit_fqi(&adjusted, n_actions, &w, gamma, fqi)?;
                let values = fqe(&adjusted, n_actions, &GreedyQ { q: &q, epsilon: 0.0 }, gamma, fqi)?;
                (q, values)
            }
        };
        let source = if id < LATTICE_SIZE { TrialSource::Lattice } else { TrialSource::Surrogate };
        trials.push(TuningTrial { id, config: w.clone(), observed: values.clone(), source, seed: trial_seed });
        candidates.push(RewardCandidate {
            trial: id,
            raw_values: values.iter().zip(&signs).map(|(v, s)| v * s).collect(),
            policy: greedy_policy_from_q(&q, 0.0),
            weights: w,
            values,
            nondominated: false,
            q,
        });
    }
    let points: Vec<Vec<f64>> = candidates.iter().map(|c| c.values.clone()).collect();
    let nd = nondominated_set(&points);
    for &i in &nd {
        candidates[i].nondominated = true;
    }
    let front: Vec<usize> = nd.iter().copied().filter(|&i| !nd.iter().any(|&j| j < i && points[j] == points[i])).collect();
    let reference: Vec<f64> = (0..metrics.len()).map(|j| points.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min)).collect();
    let front_points: Vec<Vec<f64>> = front.iter().map(|&i| points[i].clone()).collect();
    let hypervolume = hypervolume(&front_points, &reference)?;
    Ok(RewardFront { metrics: metrics.to_vec(), data_digest: digest_transitions(ts), trials, candidates, front, reference, hypervolume })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::State;
    use crate::simlab::{preset, simulate_cohort, SimPolicy};

    fn logged(seed: u64) -> Vec<Transition> {
        let env = preset("chain-mdp-2metric").unwrap();
        let uniform = |_: &State| vec![1.0 / 3.0; 3];
        simulate_cohort(&env, SimPolicy::State(&uniform), 2000, 0.0, seed).unwrap().transitions()
    }

    fn metrics() -> Vec<MetricDef> {
        preset("chain-mdp-2metric").unwrap().metrics()
    }

    #[test]
    fn anti_correlated_metrics_give_a_front() {
        let f = tune_reward(&logged(1), 3, &metrics(), 0.9, 8, 4, &FqiConfig::default()).unwrap();
        assert_eq!(f.trials.len(), 8);
        assert!(f.trials.iter().all(|t| t.source == TrialSource::Lattice));
        assert!(f.front.len() >= 2, "{:?}", f.front);
        assert!(f.hypervolume.value > 0.0);
        let pts: Vec<Vec<f64>> = f.front_candidates().map(|c| c.values.clone()).collect();
        assert_eq!(nondominated_set(&pts).len(), pts.len());
    }

    #[test]
    fn single_metric_front_is_the_best_trial() {
        let ts: Vec<Transition> = logged(2)
            .into_iter()
            .map(|mut t| {
                t.rewards.truncate(1);
                t
            })
            .collect();
        let f = tune_reward(&ts, 3, &metrics()[..1], 0.9, 8, 1, &FqiConfig::default()).unwrap();
        assert_eq!(f.front.len(), 1);
        let best = f.candidates.iter().map(|c| c.values[0]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(f.candidates[f.front[0]].values[0], best);
    }

    #[test]
    fn trial_sequence_is_reproducible() {
        let ts = logged(3);
        let a = tune_reward(&ts, 3, &metrics(), 0.9, 10, 7, &FqiConfig::default()).unwrap();
        let b = tune_reward(&ts, 3, &metrics(), 0.9, 10, 7, &FqiConfig::default()).unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.data_digest, b.data_digest);
        assert_eq!(a.trials[8].source, TrialSource::Surrogate);
    }

    #[test]
    fn small_budget_and_missing_coverage_fail() {
        let ts = logged(4);
        assert!(matches!(tune_reward(&ts, 3, &metrics(), 0.9, 7, 0, &FqiConfig::default()), Err(TuningError::BudgetTooSmall { .. })));
        let only_hold: Vec<Transition> = ts.into_iter().filter(|t| t.action == 0).collect();
        assert_eq!(tune_reward(&only_hold, 3, &metrics(), 0.9, 8, 0, &FqiConfig::default()), Err(TuningError::CoverageFailure(vec![1, 2])));
    }
}
