use serde::{Deserialize, Serialize};

use super::{propose_config, Space, TrialSource, TuningError, TuningTrial, LATTICE_SIZE};
use crate::offeval::{doubly_robust, LoggedBanditDataset, OutcomeModel, PolicyEvaluation};
use crate::policy::{DecisionPolicy, ModelOutputs};
use crate::rng::derive_seed;
use crate::simlab::{run_ab_test, EnvSpec, MetricTest, SimPolicy};

/// Two-sided 95% normal quantile for the offline upper bound.
const Z95: f64 = 1.959963984540054;

/// Everything the two tuning stages need.
pub struct PolicyTuningInput<'a> {
    pub champion: &'a DecisionPolicy,
    /// Model outputs for a context, fed to every candidate policy.
    pub outputs: &'a (dyn Fn(&[f64]) -> ModelOutputs + Sync),
    pub logged: &'a LoggedBanditDataset,
    pub outcome_model: &'a dyn OutcomeModel,
    /// Simulated environment for the online stage.
    pub env: &'a EnvSpec,
    pub time: f64,
    pub n_per_arm: usize,
    /// Index of the metric being tuned.
    pub metric: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub trial: usize,
    pub params: Vec<f64>,
    pub offline: PolicyEvaluation,
    /// Direction-adjusted 95% upper bound of the offline estimate.
    pub upper_bound: f64,
    pub pruned: bool,
    /// A/B test of the candidate (arm a) against the champion (arm b).
    pub online: Option<MetricTest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningOutcome {
    Recommended,
    /// Every candidate was pruned offline; no experiments ran.
    NoSurvivors,
    /// Candidates were tested but none beat the champion significantly.
    NoWinner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTuningReport {
    pub outcome: TuningOutcome,
    pub recommended: DecisionPolicy,
    pub recommended_trial: Option<usize>,
    /// Direction-adjusted offline estimate of the champion.
    pub champion_estimate: f64,
    pub candidates: Vec<CandidateRecord>,
    pub trials: Vec<TuningTrial>,
    pub online_experiments: usize,
}

/// Tunes the champion's declared parameters. Every proposal is first scored
/// offline with the doubly robust estimator and pruned when its upper 95%
/// bound falls below the champion's point estimate; survivors are A/B tested
/// against the champion in simulation. The trial history seen by the
/// proposer records the online candidate-arm mean when a test ran and the
/// offline estimate otherwise. The recommendation is the tested candidate
/// with the largest improvement that is significant at the A/B test level;
/// without one the champion is kept.
pub fn tune_decision_policy(input: &PolicyTuningInput, budget: usize, seed: u64) -> Result<PolicyTuningReport, TuningError> {
    if budget < LATTICE_SIZE {
        return Err(TuningError::BudgetTooSmall { have: budget, need: LATTICE_SIZE });
    }
    input.champion.validate()?;
    let space = Space::Box { params: input.champion.param_space.clone() };
    space.validate()?;
    let m = input.metric;
    let sign = input.env.metrics().get(m).map_or(1.0, |d| d.direction.sign());
    for row in &input.logged.rows {
        input.champion.action_probs(&(input.outputs)(&row.x))?;
    }
    let offline = |p: &DecisionPolicy| -> Result<PolicyEvaluation, TuningError> {
        let pi = |x: &[f64]| p.action_probs(&(input.outputs)(x)).expect("outputs checked against the champion");
        Ok(doubly_robust(input.logged, &pi, input.outcome_model)?)
    };
    let champ_eval = offline(input.champion)?;
    if m >= champ_eval.estimate.len() {
        return Err(TuningError::DimensionMismatch { expected: champ_eval.estimate.len(), got: m + 1 });
    }
    let champion_estimate = sign * champ_eval.estimate[m];
    let champ_pi = |x: &[f64]| input.champion.action_probs(&(input.outputs)(x)).expect("outputs checked against the champion");

    let mut trials: Vec<TuningTrial> = Vec::new();
    let mut candidates: Vec<CandidateRecord> = Vec::new();
    let mut policies: Vec<DecisionPolicy> = Vec::new();
    let mut online_experiments = 0;
    for id in 0..budget {
        let params = propose_config(&trials, &space, seed)?;
        let policy = input.champion.with_params(&params)?;
        let eval = offline(&policy)?;
        let est = sign * eval.estimate[m];
        let upper_bound = est + Z95 * eval.std_error[m];
        let pruned = upper_bound < champion_estimate;
        let trial_seed = derive_seed(seed, id as u64);
        let online = if pruned {
            None
        } else {
            let pi = |x: &[f64]| policy.action_probs(&(input.outputs)(x)).expect("outputs checked against the champion");
            online_experiments += 1;
            let ab = run_ab_test(input.env, SimPolicy::Context(&pi), SimPolicy::Context(&champ_pi), input.n_per_arm, input.time, trial_seed)?;
            Some(ab.metrics[m].clone())
        };
        let observed = online.as_ref().map_or(est, |t| sign * t.mean_a);
        let source = if id < LATTICE_SIZE { TrialSource::Lattice } else { TrialSource::Surrogate };
        trials.push(TuningTrial { id, config: params.clone(), observed: vec![observed], source, seed: trial_seed });
        candidates.push(CandidateRecord { trial: id, params, offline: eval, upper_bound, pruned, online });
        policies.push(policy);
    }

    let winner = candidates
        .iter()
        .filter_map(|c| {
            let t = c.online.as_ref()?;
            (t.significant && sign * t.t_stat > 0.0).then_some((c.trial, sign * (t.mean_a - t.mean_b)))
        })
        .fold(None, |best: Option<(usize, f64)>, (i, d)| if best.is_none_or(|(_, b)| d > b) { Some((i, d)) } else { best });
    let (outcome, recommended, recommended_trial) = match winner {
        Some((i, _)) => (TuningOutcome::Recommended, policies[i].clone(), Some(i)),
        None if online_experiments == 0 => (TuningOutcome::NoSurvivors, input.champion.clone(), None),
        None => (TuningOutcome::NoWinner, input.champion.clone(), None),
    };
    Ok(PolicyTuningReport { outcome, recommended, recommended_trial, champion_estimate, candidates, trials, online_experiments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offeval::LoggedRow;
    use crate::simlab::{oracle_value, preset};

    /// Imbalanced bandit with the true act-arm success probability as the
    /// score, so only the policy layer is being tuned.
    fn setup(n: usize, seed: u64) -> (EnvSpec, LoggedBanditDataset, DecisionPolicy) {
        let env = preset("bandit-imbalanced").unwrap();
        let champion = DecisionPolicy::threshold(0.5, 0.2);
        let outputs = score;
        let pi = |x: &[f64]| champion.action_probs(&outputs(x)).unwrap();
        let tr = crate::simlab::simulate_cohort(&env, SimPolicy::Context(&pi), n, 0.0, seed).unwrap();
        let rows = tr.rows.iter().map(|r| LoggedRow { x: r.x.clone(), action: r.action, propensity: r.propensity, rewards: r.outcomes.clone() }).collect();
        (env, LoggedBanditDataset { n_actions: 2, metrics: tr.metrics.clone(), rows }, champion)
    }

    fn score(x: &[f64]) -> ModelOutputs {
        ModelOutputs::Score(1.0 / (1.0 + (-(1.5 * x[0] - x[1] - 2.8)).exp()))
    }

    fn q(x: &[f64], a: usize) -> Vec<f64> {
        let ModelOutputs::Score(p) = score(x) else { unreachable!() };
        vec![if a == 1 { p } else { 0.2 }]
    }

    fn value(env: &EnvSpec, p: &DecisionPolicy) -> f64 {
        let pi = |x: &[f64]| p.action_probs(&score(x)).unwrap();
        oracle_value(env, SimPolicy::Context(&pi), 0.0, 0).unwrap().values[0]
    }

    #[test]
    fn tuned_threshold_is_no_worse_than_champion() {
        let (env, logged, champion) = setup(20_000, 1);
        let input = PolicyTuningInput { champion: &champion, outputs: &score, logged: &logged, outcome_model: &q, env: &env, time: 0.0, n_per_arm: 5000, metric: 0 };
        let r = tune_decision_policy(&input, 12, 3).unwrap();
        assert_eq!(r.trials.len(), 12);
        assert!(r.candidates.iter().all(|c| c.pruned == c.online.is_none()));
        assert_eq!(r.outcome, TuningOutcome::Recommended);
        assert!(!r.candidates[r.recommended_trial.unwrap()].pruned);
        assert!(value(&env, &r.recommended) >= value(&env, &champion));
    }

    #[test]
    fn everything_pruned_keeps_champion_without_experiments() {
        let (env, logged, _) = setup(5000, 2);
        // Champion at the optimum with no room left; declared range only
        // holds thresholds that act on nearly everyone.
        let mut champion = DecisionPolicy::threshold(0.2, 0.2);
        champion.param_space[0].lo = 0.0;
        champion.param_space[0].hi = 0.02;
        let input = PolicyTuningInput { champion: &champion, outputs: &score, logged: &logged, outcome_model: &q, env: &env, time: 0.0, n_per_arm: 100, metric: 0 };
        let r = tune_decision_policy(&input, 8, 0).unwrap();
        assert_eq!(r.outcome, TuningOutcome::NoSurvivors);
        assert_eq!(r.online_experiments, 0);
        assert_eq!(r.recommended, champion);
    }

    #[test]
    fn outputs_must_fit_the_champion() {
        let (env, logged, champion) = setup(100, 3);
        let wrong = |_: &[f64]| ModelOutputs::ActionValues(vec![0.0, 1.0]);
        let input = PolicyTuningInput { champion: &champion, outputs: &wrong, logged: &logged, outcome_model: &q, env: &env, time: 0.0, n_per_arm: 100, metric: 0 };
        assert!(matches!(tune_decision_policy(&input, 8, 0), Err(TuningError::Policy(_))));
    }
}
