//! Decision policies that turn model outputs into actions with exact logged
//! propensities.
//!
//! Exploration is uniform-ε: the greedy action gets `1 - ε + ε/K`, every
//! other action `ε/K`. Sampling draws a single uniform and walks the CDF in
//! action order, so [`decide`] and [`propensity_of`] agree exactly.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{seeded, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Binary: action 1 iff score >= theta.
    Threshold { theta: f64 },
    /// argmax over actions of `sum_m weights[m] * y[a][m]`.
    ValueArgmax { weights: Vec<f64> },
    /// Binary: treat (action 1) iff `sign * uplift > threshold`. `sign` is -1
    /// for metrics that should be minimized.
    Uplift { threshold: f64, sign: f64 },
    /// argmax over the action values of a Q-function.
    RlGreedy { q_ref: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPolicy {
    pub kind: PolicyKind,
    pub n_actions: usize,
    pub epsilon: f64,
    pub version: String,
    #[serde(default)]
    pub param_space: Vec<ParamRange>,
}

/// What a model produced for one decision context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelOutputs {
    /// Probability (threshold) or uplift estimate (uplift).
    Score(f64),
    /// Per-action, per-metric predictions, indexed `[action][metric]`.
    PerAction(Vec<Vec<f64>>),
    /// One value per action.
    ActionValues(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: usize,
    pub propensity: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("model outputs do not cover all {0} actions")]
    MissingActionOutput(usize),
    #[error("invalid policy: {0}")]
    Invalid(String),
}

impl DecisionPolicy {
    pub fn threshold(theta: f64, epsilon: f64) -> Self {
        Self {
            kind: PolicyKind::Threshold { theta },
            n_actions: 2,
            epsilon,
            version: format!("threshold-{theta}-eps{epsilon}"),
            param_space: vec![ParamRange { name: "theta".into(), lo: 0.0, hi: 1.0 }],
        }
    }

    pub fn value_argmax(weights: Vec<f64>, n_actions: usize, epsilon: f64) -> Self {
        let version = format!("value-argmax-{weights:?}-eps{epsilon}");
        let param_space = (0..weights.len()).map(|m| ParamRange { name: format!("w{m}"), lo: 0.0, hi: 1.0 }).collect();
        Self { kind: PolicyKind::ValueArgmax { weights }, n_actions, epsilon, version, param_space }
    }

    pub fn uplift(threshold: f64, sign: f64, epsilon: f64) -> Self {
        Self { kind: PolicyKind::Uplift { threshold, sign }, n_actions: 2, epsilon, version: format!("uplift-{threshold}-eps{epsilon}"), param_space: Vec::new() }
    }

    pub fn rl_greedy(q_ref: impl Into<String>, n_actions: usize, epsilon: f64) -> Self {
        let q_ref = q_ref.into();
        Self { version: format!("rl-greedy-{q_ref}-eps{epsilon}"), kind: PolicyKind::RlGreedy { q_ref }, n_actions, epsilon, param_space: Vec::new() }
    }

    pub fn with_version(mut self, version: impl Into<String>) -> Self {
        self.version = version.into();
        self
    }

    /// Current values of the tunable parameters, in `param_space` order.
    pub fn params(&self) -> Vec<f64> {
        match &self.kind {
            PolicyKind::Threshold { theta } => vec![*theta],
            PolicyKind::ValueArgmax { weights } => weights.clone(),
            _ => Vec::new(),
        }
    }

    /// A copy with new tunable parameter values and a version derived from
    /// them.
    pub fn with_params(&self, values: &[f64]) -> Result<Self, PolicyError> {
        if values.len() != self.param_space.len() {
            return Err(PolicyError::Invalid(format!("expected {} parameters, got {}", self.param_space.len(), values.len())));
        }
        let mut p = match &self.kind {
            PolicyKind::Threshold { .. } => Self::threshold(values[0], self.epsilon),
            PolicyKind::ValueArgmax { .. } => Self::value_argmax(values.to_vec(), self.n_actions, self.epsilon),
            _ => return Err(PolicyError::Invalid("policy kind has no tunable parameters".into())),
        };
        p.param_space = self.param_space.clone();
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Invalid(m.to_string()));
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad("epsilon must be in [0, 1)");
        }
        if self.n_actions == 0 {
            return bad("no actions");
        }
        match &self.kind {
            PolicyKind::Threshold { theta } if !(0.0..=1.0).contains(theta) => bad("theta must be in [0, 1]"),
            PolicyKind::ValueArgmax { weights } if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().all(|w| *w == 0.0) => bad("weights must be nonnegative and not all zero"),
            PolicyKind::Uplift { sign, .. } if sign.abs() != 1.0 => bad("uplift sign must be +1 or -1"),
            PolicyKind::Threshold { .. } | PolicyKind::Uplift { .. } if self.n_actions != 2 => bad("binary policies have 2 actions"),
            _ => Ok(()),
        }
    }

    /// The action chosen without exploration. Ties go to the lowest action.
    pub fn greedy(&self, outputs: &ModelOutputs) -> Result<usize, PolicyError> {
        let missing = || PolicyError::MissingActionOutput(self.n_actions);
        match (&self.kind, outputs) {
            (PolicyKind::Threshold { theta }, ModelOutputs::Score(s)) => Ok(usize::from(*s >= *theta)),
            (PolicyKind::Uplift { threshold, sign }, ModelOutputs::Score(t)) => Ok(usize::from(sign * t > *threshold)),
            (PolicyKind::ValueArgmax { weights }, ModelOutputs::PerAction(y)) => {
                if y.len() != self.n_actions || y.iter().any(|row| row.len() < weights.len()) {
                    return Err(missing());
                }
                let values: Vec<f64> = y.iter().map(|row| weights.iter().zip(row).map(|(w, v)| w * v).sum()).collect();
                Ok(crate::models::metrics::argmax(&values))
            }
            (PolicyKind::RlGreedy { .. }, ModelOutputs::ActionValues(q)) if q.len() == self.n_actions => Ok(crate::models::metrics::argmax(q)),
            _ => Err(missing()),
        }
    }

    /// Full action distribution, summing to one.
    pub fn action_probs(&self, outputs: &ModelOutputs) -> Result<Vec<f64>, PolicyError> {
        let g = self.greedy(outputs)?;
        Ok(exploration_probs(g, self.n_actions, self.epsilon))
    }
}

/// Uniform-ε distribution around a greedy action.
pub fn exploration_probs(greedy: usize, k: usize, epsilon: f64) -> Vec<f64> {
    let other = epsilon / k as f64;
    let mut p = vec![other; k];
    p[greedy] = 1.0 - epsilon + other;
    p
}

/// Inverse-CDF draw from `probs` using a single uniform `u` in [0, 1).
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc && *p > 0.0 {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

pub fn decide(policy: &DecisionPolicy, outputs: &ModelOutputs, seed: u64) -> Result<Decision, PolicyError> {
    decide_with(policy, outputs, &mut seeded(seed))
}

pub fn decide_with(policy: &DecisionPolicy, outputs: &ModelOutputs, rng: &mut Rng) -> Result<Decision, PolicyError> {
    let probs = policy.action_probs(outputs)?;
    let action = sample_index(&probs, rng.random::<f64>());
    Ok(Decision { action, propensity: probs[action] })
}

pub fn propensity_of(policy: &DecisionPolicy, outputs: &ModelOutputs, action: usize) -> Result<f64, PolicyError> {
    let probs = policy.action_probs(outputs)?;
    probs.get(action).copied().ok_or(PolicyError::MissingActionOutput(policy.n_actions))
}

/// Orders items by descending score, ties by id ascending, keeping `top_n`.
pub fn rank_items(items: &[(String, f64)], top_n: Option<usize>) -> Vec<String> {
    let mut v: Vec<&(String, f64)> = items.iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter().take(top_n.unwrap_or(usize::MAX)).map(|(id, _)| id.clone()).collect()
}
