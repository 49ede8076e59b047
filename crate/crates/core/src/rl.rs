//! Offline reinforcement learning from logged one-step transitions: coverage
//! gating, fitted Q iteration, greedy policy extraction and fitted Q
//! evaluation. Both a tabular and a linear (state ⊗ action one-hot)
//! representation are supported.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eventlog::JoinedExample;
use crate::linalg::RidgeSolver;
use crate::models::metrics::argmax;
use crate::policy::DecisionPolicy;

pub const TRANSITION_SCHEMA: &str = "transition/v1";
pub const MIN_ACTION_COUNT: usize = 50;
pub const MIN_ACTION_FRACTION: f64 = 0.01;
pub const DEFAULT_EPSILON: f64 = 0.05;
pub const DEFAULT_ITERATIONS: usize = 500;
const CONVERGED: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum State {
    Discrete(usize),
    Dense(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub unit_id: String,
    pub step: usize,
    pub state: State,
    pub action: usize,
    pub rewards: Vec<f64>,
    /// Ignored when `terminal`.
    pub next_state: Option<State>,
    pub terminal: bool,
    pub propensity: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RlError {
    #[error("examples for unit `{0}` are not in timestamp order")]
    UnorderedInput(String),
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("example {0} lacks metric `{1}`")]
    MissingMetric(String, String),
    #[error("coverage check failed for actions {0:?}")]
    CoverageFailure(Vec<usize>),
    #[error("discount must be in [0, 1), got {0}")]
    BadGamma(f64),
    #[error("reward weights must be nonnegative and sum to 1")]
    BadWeights,
    #[error("state representation does not match the Q function")]
    StateMismatch,
    #[error("io: {0}")]
    Io(String),
}

/// Turns per-unit example sequences into transitions. Examples of one unit
/// must appear in nondecreasing timestamp order; units may interleave. Each
/// unit's last example is terminal.
pub fn build_transitions(
    examples: &[JoinedExample],
    state_of: impl Fn(&JoinedExample) -> State,
    action_of: impl Fn(&str) -> Option<usize>,
    metrics: &[String],
) -> Result<Vec<Transition>, RlError> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_unit: BTreeMap<&str, Vec<&JoinedExample>> = BTreeMap::new();
    for ex in examples {
        let seq = by_unit.entry(&ex.unit_id).or_insert_with(|| {
            order.push(&ex.unit_id);
            Vec::new()
        });
        if seq.last().is_some_and(|p| p.timestamp > ex.timestamp) {
            return Err(RlError::UnorderedInput(ex.unit_id.clone()));
        }
        seq.push(ex);
    }
    let mut out = Vec::with_capacity(examples.len());
    for unit in order {
        let seq = &by_unit[unit];
        for (i, ex) in seq.iter().enumerate() {
            let rewards = metrics
                .iter()
                .map(|m| ex.metric_values.get(m).copied().ok_or_else(|| RlError::MissingMetric(ex.decision_id.clone(), m.clone())))
                .collect::<Result<Vec<f64>, _>>()?;
            let terminal = i + 1 == seq.len();
            out.push(Transition {
                unit_id: unit.to_string(),
                step: i,
                state: state_of(ex),
                action: action_of(&ex.action).ok_or_else(|| RlError::UnknownAction(ex.action.clone()))?,
                rewards,
                next_state: if terminal { None } else { Some(state_of(seq[i + 1])) },
                terminal,
                propensity: ex.propensity,
            });
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Tagged {
    schema: String,
    #[serde(flatten)]
    transition: Transition,
}

/// Writes transitions as newline-delimited JSON with a schema tag per line.
pub fn write_transitions(path: &Path, transitions: &[Transition]) -> Result<(), RlError> {
    let io = |e: std::io::Error| RlError::Io(e.to_string());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for t in transitions {
        let line = serde_json::to_string(&Tagged { schema: TRANSITION_SCHEMA.into(), transition: t.clone() }).expect("transition serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_transitions(path: &Path) -> Result<Vec<Transition>, RlError> {
    let io = |e: std::io::Error| RlError::Io(e.to_string());
    let f = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Tagged = serde_json::from_str(&line).map_err(|e| RlError::Io(e.to_string()))?;
        if t.schema != TRANSITION_SCHEMA {
            return Err(RlError::Io(format!("unsupported schema `{}`", t.schema)));
        }
        out.push(t.transition);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub counts: Vec<usize>,
    /// Smallest logged propensity per action; `None` if never logged.
    pub min_propensity: Vec<Option<f64>>,
    pub threshold: usize,
    pub uncovered: Vec<usize>,
    pub pass: bool,
}

/// Every action needs at least `max(50, ceil(1% of n))` transitions.
pub fn check_coverage(transitions: &[Transition], n_actions: usize) -> CoverageReport {
    let mut counts = vec![0usize; n_actions];
    let mut min_propensity: Vec<Option<f64>> = vec![None; n_actions];
    for t in transitions {
        if t.action < n_actions {
            counts[t.action] += 1;
            let m = &mut min_propensity[t.action];
            *m = Some(m.map_or(t.propensity, |v| v.min(t.propensity)));
        }
    }
    let threshold = MIN_ACTION_COUNT.max((MIN_ACTION_FRACTION * transitions.len() as f64).ceil() as usize);
    let uncovered: Vec<usize> = (0..n_actions).filter(|&a| counts[a] < threshold).collect();
    CoverageReport { pass: uncovered.is_empty(), counts, min_propensity, threshold, uncovered }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum QRepr {
    Tabular { table: Vec<Vec<f64>> },
    /// Weights over `[s, 1] ⊗ onehot(a)`, blocked by action.
    Linear { weights: Vec<f64>, state_dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    pub repr: QRepr,
    pub n_actions: usize,
    pub gamma: f64,
    pub reward_weights: Vec<f64>,
    pub iterations: usize,
}

impl QFunction {
    pub fn values(&self, s: &State) -> Result<Vec<f64>, RlError> {
        match (&self.repr, s) {
            (QRepr::Tabular { table }, State::Discrete(i)) => Ok(table.get(*i).cloned().unwrap_or_else(|| vec![0.0; self.n_actions])),
            (QRepr::Linear { weights, state_dim }, State::Dense(x)) if x.len() == *state_dim => {
                let b = state_dim + 1;
                Ok((0..self.n_actions).map(|a| linear_q(weights, x, a, b)).collect())
            }
            _ => Err(RlError::StateMismatch),
        }
    }

    pub fn greedy_action(&self, s: &State) -> Result<usize, RlError> {
        Ok(argmax(&self.values(s)?))
    }

    /// Hex SHA-256 of the serialized Q function.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("q serializes")))
    }
}

fn linear_q(w: &[f64], x: &[f64], a: usize, block: usize) -> f64 {
    let off = a * block;
    x.iter().zip(&w[off..off + block - 1]).map(|(xi, wi)| xi * wi).sum::<f64>() + w[off + block - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Tabular,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FqiConfig {
    pub representation: Representation,
    pub iterations: usize,
    pub ridge: f64,
}

impl Default for FqiConfig {
    fn default() -> Self {
        Self { representation: Representation::Tabular, iterations: DEFAULT_ITERATIONS, ridge: 1e-6 }
    }
}

/// Action distribution over a state.
pub trait StatePolicy: Sync {
    fn probs(&self, s: &State) -> Vec<f64>;
}

impl<F: Fn(&State) -> Vec<f64> + Sync> StatePolicy for F {
    fn probs(&self, s: &State) -> Vec<f64> {
        self(s)
    }
}

/// The ε-greedy policy of a Q function, usable for evaluation.
pub struct GreedyQ<'a> {
    pub q: &'a QFunction,
    pub epsilon: f64,
}

impl StatePolicy for GreedyQ<'_> {
    fn probs(&self, s: &State) -> Vec<f64> {
        let a = self.q.greedy_action(s).unwrap_or(0);
        crate::policy::exploration_probs(a, self.q.n_actions, self.epsilon)
    }
}

/// The `rl-greedy` decision policy of `q` with exploration `epsilon`.
pub fn greedy_policy_from_q(q: &QFunction, epsilon: f64) -> DecisionPolicy {
    DecisionPolicy::rl_greedy(q.digest(), q.n_actions, epsilon)
}

/// How the bootstrapped next-state value is formed.
enum Backup<'a> {
    Max,
    Expect(&'a dyn StatePolicy),
}

struct Tabular {
    n_states: usize,
    /// Transition indices per (state, action).
    groups: Vec<Vec<Vec<usize>>>,
}

impl Tabular {
    fn new(ts: &[Transition], n_actions: usize) -> Result<Self, RlError> {
        let mut n_states = 0;
        for t in ts {
            for s in std::iter::once(&t.state).chain(t.next_state.iter()) {
                match s {
                    State::Discrete(i) => n_states = n_states.max(i + 1),
                    State::Dense(_) => return Err(RlError::StateMismatch),
                }
            }
        }
        let mut groups = vec![vec![Vec::new(); n_actions]; n_states];
        for (i, t) in ts.iter().enumerate() {
            if let State::Discrete(s) = t.state {
                groups[s][t.action].push(i);
            }
        }
        Ok(Self { n_states, groups })
    }

    fn iterate(&self, ts: &[Transition], reward: &[f64], gamma: f64, backup: &Backup, iterations: usize) -> (Vec<Vec<f64>>, usize) {
        let k = self.groups.first().map_or(0, Vec::len);
        let visited: Vec<Vec<bool>> = self.groups.iter().map(|g| g.iter().map(|v| !v.is_empty()).collect()).collect();
        let next_probs: Vec<Option<Vec<f64>>> = match backup {
            Backup::Max => vec![None; self.n_states],
            Backup::Expect(pi) => (0..self.n_states).map(|s| Some(pi.probs(&State::Discrete(s)))).collect(),
        };
        let mut q = vec![vec![0.0; k]; self.n_states];
        let mut done = 0;
        for it in 0..iterations {
            let v: Vec<f64> = (0..self.n_states)
                .map(|s| match &next_probs[s] {
                    None => (0..k).filter(|&a| visited[s][a]).map(|a| q[s][a]).fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x)))).unwrap_or(0.0),
                    Some(p) => (0..k).map(|a| p[a] * q[s][a]).sum(),
                })
                .collect();
            let mut next = vec![vec![0.0; k]; self.n_states];
            let mut delta: f64 = 0.0;
            for s in 0..self.n_states {
                for a in 0..k {
                    let idx = &self.groups[s][a];
                    if idx.is_empty() {
                        continue;
                    }
                    let mut sum = 0.0;
                    for &i in idx {
                        let t = &ts[i];
                        let boot = match (&t.next_state, t.terminal) {
                            (Some(State::Discrete(sp)), false) => v[*sp],
                            _ => 0.0,
                        };
                        sum += reward[i] + gamma * boot;
                    }
                    next[s][a] = sum / idx.len() as f64;
                    delta = delta.max((next[s][a] - q[s][a]).abs());
                }
            }
            q = next;
            done = it + 1;
            if delta < CONVERGED {
                break;
            }
        }
        (q, done)
    }
}

fn features(x: &[f64], a: usize, k: usize) -> Vec<f64> {
    let b = x.len() + 1;
    let mut f = vec![0.0; b * k];
    f[a * b..a * b + x.len()].copy_from_slice(x);
    f[a * b + x.len()] = 1.0;
    f
}

fn dense(s: &State) -> Result<&[f64], RlError> {
    match s {
        State::Dense(x) => Ok(x),
        State::Discrete(_) => Err(RlError::StateMismatch),
    }
}

fn iterate_linear(ts: &[Transition], k: usize, reward: &[f64], gamma: f64, backup: &Backup, cfg: &FqiConfig) -> Result<(Vec<f64>, usize, usize), RlError> {
    let d = ts.first().map(|t| dense(&t.state).map(<[f64]>::len)).transpose()?.unwrap_or(0);
    let rows: Vec<Vec<f64>> = ts.iter().map(|t| dense(&t.state).map(|x| features(x, t.action, k))).collect::<Result<_, _>>()?;
    let solver = RidgeSolver::new(&rows, cfg.ridge.max(1e-12)).ok_or(RlError::StateMismatch)?;
    let b = d + 1;
    let next: Vec<Option<&[f64]>> = ts.iter().map(|t| if t.terminal { Ok(None) } else { t.next_state.as_ref().map(dense).transpose() }).collect::<Result<_, _>>()?;
    let next_probs: Vec<Option<Vec<f64>>> = match backup {
        Backup::Max => vec![None; ts.len()],
        Backup::Expect(pi) => ts.iter().map(|t| t.next_state.as_ref().map(|s| pi.probs(s))).collect(),
    };
    let mut w = vec![0.0; b * k];
    let mut done = 0;
    for it in 0..cfg.iterations {
        let y: Vec<f64> = (0..ts.len())
            .map(|i| {
                let boot = match next[i] {
                    None => 0.0,
                    Some(x) => {
                        let qs: Vec<f64> = (0..k).map(|a| linear_q(&w, x, a, b)).collect();
                        match &next_probs[i] {
                            None => qs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                            Some(p) => p.iter().zip(&qs).map(|(p, q)| p * q).sum(),
                        }
                    }
                };
                reward[i] + gamma * boot
            })
            .collect();
        let nw = solver.solve(&rows, &y);
        let delta = nw.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = nw;
        done = it + 1;
        if delta < CONVERGED {
            break;
        }
    }
    Ok((w, d, done))
}

fn check_inputs(ts: &[Transition], n_actions: usize, gamma: f64) -> Result<(), RlError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(RlError::BadGamma(gamma));
    }
    let cov = check_coverage(ts, n_actions);
    if !cov.pass {
        return Err(RlError::CoverageFailure(cov.uncovered));
    }
    Ok(())
}

/// Fitted Q iteration on the scalar reward `w · r`.
pub fn fit_fqi(ts: &[Transition], n_actions: usize, weights: &[f64], gamma: f64, cfg: &FqiConfig) -> Result<QFunction, RlError> {
    check_inputs(ts, n_actions, gamma)?;
    if weights.iter().any(|w| *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(RlError::BadWeights);
    }
    let reward: Vec<f64> = ts.iter().map(|t| t.rewards.iter().zip(weights).map(|(r, w)| r * w).sum()).collect();
    let (repr, iterations) = match cfg.representation {
        Representation::Tabular => {
            let (table, it) = Tabular::new(ts, n_actions)?.iterate(ts, &reward, gamma, &Backup::Max, cfg.iterations);
            (QRepr::Tabular { table }, it)
        }
        Representation::Linear => {
            let (weights, state_dim, it) = iterate_linear(ts, n_actions, &reward, gamma, &Backup::Max, cfg)?;
            (QRepr::Linear { weights, state_dim }, it)
        }
    };
    Ok(QFunction { repr, n_actions, gamma, reward_weights: weights.to_vec(), iterations })
}

/// Fitted Q evaluation of `pi`, one reward channel at a time. Returns the
/// estimated discounted return per metric, averaged over the first state of
/// each unit.
pub fn fqe(ts: &[Transition], n_actions: usize, pi: &dyn StatePolicy, gamma: f64, cfg: &FqiConfig) -> Result<Vec<f64>, RlError> {
    check_inputs(ts, n_actions, gamma)?;
    let n_metrics = ts.first().map_or(0, |t| t.rewards.len());
    let starts: Vec<&State> = ts.iter().filter(|t| t.step == 0).map(|t| &t.state).collect();
    let start_probs: Vec<Vec<f64>> = starts.iter().map(|s| pi.probs(s)).collect();
    let tab = match cfg.representation {
        Representation::Tabular => Some(Tabular::new(ts, n_actions)?),
        Representation::Linear => None,
    };
    let mut out = Vec::with_capacity(n_metrics);
    for m in 0..n_metrics {
        let reward: Vec<f64> = ts.iter().map(|t| t.rewards[m]).collect();
        let q = match &tab {
            Some(tab) => {
                let (table, _) = tab.iterate(ts, &reward, gamma, &Backup::Expect(pi), cfg.iterations);
                QFunction { repr: QRepr::Tabular { table }, n_actions, gamma, reward_weights: Vec::new(), iterations: 0 }
            }
            None => {
                let (weights, state_dim, _) = iterate_linear(ts, n_actions, &reward, gamma, &Backup::Expect(pi), cfg)?;
                QFunction { repr: QRepr::Linear { weights, state_dim }, n_actions, gamma, reward_weights: Vec::new(), iterations: 0 }
            }
        };
        let mut total = 0.0;
        for (s, p) in starts.iter().zip(&start_probs) {
            total += q.values(s)?.iter().zip(p).map(|(q, p)| q * p).sum::<f64>();
        }
        out.push(total / starts.len().max(1) as f64);
    }
    Ok(out)
}
