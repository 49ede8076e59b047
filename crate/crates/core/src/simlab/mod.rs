//! Ground-truth synthetic environments standing in for live product traffic:
//! contextual bandits with drift schedules, randomized-experiment (HTE)
//! environments and multi-metric MDPs, plus simulated cohorts, A/B test
//! statistics and exact or Monte Carlo oracles.

mod abtest;
mod context;
mod mdp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use abtest::{run_ab_test, welch_test, ABTestResult, MetricTest, ALPHA};
pub use context::{BanditEnv, Link, TauFn, HteEnv, Arm, ORACLE_SAMPLES};
pub use mdp::{ChainAction, ChainParams, MdpEnv};

use crate::eventlog::{ObservationEvent, PredictionEvent};
use crate::features::FeatureVector;
use crate::offeval::TargetPolicy;
use crate::rl::{State, StatePolicy, Transition};
use crate::usecase::Direction;

const CATALOG: &str = include_str!("presets.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDef {
    pub name: String,
    pub direction: Direction,
}

/// A translation applied from simulated time `at` onwards. Shifts add up
/// across steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStep {
    pub at: f64,
    pub context_shift: Vec<f64>,
    #[serde(default)]
    pub anchor_shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvKind {
    Bandit(BanditEnv),
    Hte(HteEnv),
    Chain(ChainParams),
    Mdp(MdpEnv),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub version: u32,
    pub noise: f64,
    #[serde(default)]
    pub drift: Vec<DriftStep>,
    pub env: EnvKind,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid environment: {0}")]
    BadEnv(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("need at least {need} units per arm, got {have}")]
    TooSmallArms { have: usize, need: usize },
    #[error("policy kind does not fit this environment")]
    PolicyMismatch,
}

#[derive(Deserialize)]
struct Catalog {
    catalog_version: u32,
    presets: Vec<EnvSpec>,
}

fn catalog() -> Catalog {
    serde_json::from_str(CATALOG).expect("preset catalog parses")
}

pub fn catalog_version() -> u32 {
    catalog().catalog_version
}

pub fn preset_names() -> Vec<String> {
    catalog().presets.into_iter().map(|p| p.name).collect()
}

pub fn preset(name: &str) -> Result<EnvSpec, SimError> {
    catalog().presets.into_iter().find(|p| p.name == name).ok_or_else(|| SimError::UnknownPreset(name.to_string()))
}

/// How a cohort chooses actions.
#[derive(Clone, Copy)]
pub enum SimPolicy<'a> {
    Context(&'a dyn TargetPolicy),
    State(&'a dyn StatePolicy),
}

/// One simulated decision and its realized outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub unit_id: String,
    pub step: usize,
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_state: Option<usize>,
    pub terminal: bool,
    pub action: usize,
    pub propensity: f64,
    pub outcomes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub env: String,
    pub time: f64,
    pub action_names: Vec<String>,
    pub metrics: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl Trace {
    /// Feature names used when emitting events: `x1..xd`.
    pub fn feature_names(&self) -> Vec<String> {
        let d = self.rows.first().map_or(0, |r| r.x.len());
        (1..=d).map(|i| format!("x{i}")).collect()
    }

    /// Mean realized outcome per metric.
    pub fn mean_outcomes(&self) -> Vec<f64> {
        let m = self.metrics.len();
        let mut s = vec![0.0; m];
        for r in &self.rows {
            for j in 0..m {
                s[j] += r.outcomes[j];
            }
        }
        s.into_iter().map(|v| v / self.rows.len().max(1) as f64).collect()
    }

    /// Eventlog wire records: one prediction and one observation per row.
    /// Decision ids are `{prefix}{row index}`; events are stamped at `t0`
    /// plus the row's step.
    pub fn to_events(&self, use_case: &str, prefix: &str, policy_version: &str, t0: i64) -> Vec<(PredictionEvent, ObservationEvent)> {
        let names = self.feature_names();
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let decision_id = format!("{prefix}{i:08}");
                let mut fv = FeatureVector::new();
                for (n, v) in names.iter().zip(&r.x) {
                    fv = fv.with(n.as_str(), *v);
                }
                let ts = t0 + r.step as i64;
                (
                    PredictionEvent {
                        decision_id: decision_id.clone(),
                        use_case: use_case.to_string(),
                        unit_id: r.unit_id.clone(),
                        timestamp: ts,
                        features: fv,
                        action: self.action_names[r.action].clone(),
                        propensity: r.propensity,
                        policy_version: policy_version.to_string(),
                        idempotency_key: None,
                    },
                    ObservationEvent { decision_id, timestamp: ts, metric_values: self.metrics.iter().cloned().zip(r.outcomes.iter().copied()).collect() },
                )
            })
            .collect()
    }

    /// RL transitions for MDP traces. Rewards are raw metric values.
    pub fn transitions(&self) -> Vec<Transition> {
        self.rows
            .iter()
            .map(|r| Transition {
                unit_id: r.unit_id.clone(),
                step: r.step,
                state: r.state.map_or_else(|| State::Dense(r.x.clone()), State::Discrete),
                action: r.action,
                rewards: r.outcomes.clone(),
                next_state: if r.terminal { None } else { r.next_state.map(State::Discrete) },
                terminal: r.terminal,
                propensity: r.propensity,
            })
            .collect()
    }
}

/// Expected value of a policy and how it was computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub values: Vec<f64>,
    /// `None` for exact computations, otherwise the Monte Carlo sample size.
    pub monte_carlo_samples: Option<usize>,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.noise >= 0.0) {
            return Err(SimError::BadEnv("noise must be nonnegative".into()));
        }
        match &self.env {
            EnvKind::Bandit(b) => b.validate(&self.drift),
            EnvKind::Hte(h) => h.validate(),
            EnvKind::Chain(c) => c.build().validate(),
            EnvKind::Mdp(m) => m.validate(),
        }
    }

    pub fn metrics(&self) -> Vec<MetricDef> {
        match &self.env {
            EnvKind::Bandit(b) => b.metrics.clone(),
            EnvKind::Hte(h) => vec![h.metric.clone()],
            EnvKind::Chain(c) => c.metrics.clone(),
            EnvKind::Mdp(m) => m.metrics.clone(),
        }
    }

    pub fn action_names(&self) -> Vec<String> {
        match &self.env {
            EnvKind::Bandit(b) => b.arms.iter().map(|a| a.name.clone()).collect(),
            EnvKind::Hte(_) => vec!["control".into(), "treatment".into()],
            EnvKind::Chain(c) => c.actions.iter().map(|a| a.name.clone()).collect(),
            EnvKind::Mdp(m) => m.action_names.clone(),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.action_names().len()
    }

    /// The tabular MDP for `chain`/`mdp` environments.
    pub fn mdp(&self) -> Option<MdpEnv> {
        match &self.env {
            EnvKind::Chain(c) => Some(c.build()),
            EnvKind::Mdp(m) => Some(m.clone()),
            _ => None,
        }
    }

    /// Accumulated (context, anchor) translation at time `t`.
    pub fn shifts_at(&self, t: f64, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut c = vec![0.0; dim];
        let mut a = vec![0.0; dim];
        for step in self.drift.iter().filter(|s| s.at <= t) {
            for (i, v) in step.context_shift.iter().enumerate().take(dim) {
                c[i] += v;
            }
            for (i, v) in step.anchor_shift.iter().enumerate().take(dim) {
                a[i] += v;
            }
        }
        (c, a)
    }
}

/// Simulates `n` units (episodes for MDPs) at simulated time `t`.
pub fn simulate_cohort(env: &EnvSpec, policy: SimPolicy, n: usize, t: f64, seed: u64) -> Result<Trace, SimError> {
    env.validate()?;
    if n == 0 {
        return Err(SimError::BadEnv("cohort size must be positive".into()));
    }
    let rows = match (&env.env, policy) {
        (EnvKind::Bandit(b), SimPolicy::Context(pi)) => b.simulate(env, pi, n, t, seed),
        (EnvKind::Hte(h), SimPolicy::Context(pi)) => h.simulate(env.noise, pi, n, seed),
        (EnvKind::Chain(_) | EnvKind::Mdp(_), SimPolicy::State(pi)) => env.mdp().expect("mdp env").simulate(env.noise, pi, n, seed),
        _ => return Err(SimError::PolicyMismatch),
    };
    Ok(Trace {
        env: env.name.clone(),
        time: t,
        action_names: env.action_names(),
        metrics: env.metrics().into_iter().map(|m| m.name).collect(),
        rows,
    })
}

/// Per-metric expected value of `policy` at time `t`. MDPs are solved
/// exactly; context environments use a seeded Monte Carlo over
/// [`ORACLE_SAMPLES`] contexts with noise-free outcome means.
pub fn oracle_value(env: &EnvSpec, policy: SimPolicy, t: f64, seed: u64) -> Result<OracleValue, SimError> {
    match (&env.env, policy) {
        (EnvKind::Bandit(b), SimPolicy::Context(pi)) => Ok(b.oracle(env, Some(pi), t, seed)),
        (EnvKind::Hte(h), SimPolicy::Context(pi)) => Ok(h.oracle(Some(pi), seed)),
        (EnvKind::Chain(_) | EnvKind::Mdp(_), SimPolicy::State(pi)) => {
            let m = env.mdp().expect("mdp env");
            Ok(OracleValue { values: m.evaluate(&m.policy_matrix(pi)), monte_carlo_samples: None })
        }
        _ => Err(SimError::PolicyMismatch),
    }
}

/// Value of the pointwise-optimal policy. For MDPs the optimum is for the
/// direction-adjusted scalar reward `weights · r` and the returned values are
/// the per-metric values of that policy.
pub fn oracle_optimal(env: &EnvSpec, weights: &[f64], t: f64, seed: u64) -> Result<OracleValue, SimError> {
    match &env.env {
        EnvKind::Bandit(b) => Ok(b.oracle(env, None, t, seed)),
        EnvKind::Hte(h) => Ok(h.oracle(None, seed)),
        EnvKind::Chain(_) | EnvKind::Mdp(_) => {
            let m = env.mdp().expect("mdp env");
            let pi = m.optimal_policy(weights);
            Ok(OracleValue { values: m.evaluate(&m.deterministic_matrix(&pi)), monte_carlo_samples: None })
        }
    }
}
