use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DriftStep, EnvSpec, MetricDef, OracleValue, SimError, TraceRow};
use crate::models::metrics::argmax;
use crate::offeval::TargetPolicy;
use crate::policy::sample_index;
use crate::rng::{derive_seed, seeded, Rng};

/// Contexts drawn by context-environment oracles.
pub const ORACLE_SAMPLES: usize = 1_000_000;
const ORACLE_CHUNKS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    /// Outcome = linear predictor + Gaussian noise.
    Identity,
    /// Outcome ~ Bernoulli(sigmoid(linear predictor)).
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    /// Indexed `[metric][feature]`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Linear contextual bandit. The linear predictor of arm `a`, metric `m` is
/// `w_am · (x - anchor) + b_am` with `x ~ N(context_mean, context_sd^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditEnv {
    pub dim: usize,
    pub link: Link,
    pub context_mean: Vec<f64>,
    pub context_sd: f64,
    pub anchor: Vec<f64>,
    pub metrics: Vec<MetricDef>,
    pub arms: Vec<Arm>,
}

fn draw_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl BanditEnv {
    pub(super) fn validate(&self, drift: &[DriftStep]) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::BadEnv(m));
        if self.context_mean.len() != self.dim || self.anchor.len() != self.dim {
            return bad("context mean and anchor must match dim".into());
        }
        if self.arms.len() < 2 || self.metrics.is_empty() {
            return bad("need at least 2 arms and 1 metric".into());
        }
        for a in &self.arms {
            if a.weights.len() != self.metrics.len() || a.bias.len() != self.metrics.len() || a.weights.iter().any(|w| w.len() != self.dim) {
                return bad(format!("arm `{}` has mis-sized parameters", a.name));
            }
        }
        if drift.iter().any(|d| d.context_shift.len() > self.dim || d.anchor_shift.len() > self.dim) {
            return bad("drift shift longer than dim".into());
        }
        if !(self.context_sd >= 0.0) {
            return bad("context_sd must be nonnegative".into());
        }
        Ok(())
    }

    /// Noise-free expected outcome of `arm` on metric `m`.
    pub fn mean(&self, arm: usize, m: usize, x: &[f64], anchor: &[f64]) -> f64 {
        let a = &self.arms[arm];
        let eta: f64 = a.weights[m].iter().zip(x).zip(anchor).map(|((w, x), c)| w * (x - c)).sum::<f64>() + a.bias[m];
        match self.link {
            Link::Identity => eta,
            Link::Logistic => sigmoid(eta),
        }
    }

    fn frame(&self, env: &EnvSpec, t: f64) -> (Vec<f64>, Vec<f64>) {
        let (cs, as_) = env.shifts_at(t, self.dim);
        (
            self.context_mean.iter().zip(&cs).map(|(m, s)| m + s).collect(),
            self.anchor.iter().zip(&as_).map(|(m, s)| m + s).collect(),
        )
    }

    fn draw_context(&self, mean: &[f64], rng: &mut Rng) -> Vec<f64> {
        mean.iter().map(|m| m + self.context_sd * draw_normal(rng)).collect()
    }

    pub(super) fn simulate(&self, env: &EnvSpec, pi: &dyn TargetPolicy, n: usize, t: f64, seed: u64) -> Vec<TraceRow> {
        let (mean, anchor) = self.frame(env, t);
        let mut rng = seeded(seed);
        (0..n)
            .map(|i| {
                let x = self.draw_context(&mean, &mut rng);
                let probs = pi.action_probs(&x);
                let a = sample_index(&probs, rng.random::<f64>());
                let outcomes = (0..self.metrics.len())
                    .map(|m| {
                        let mu = self.mean(a, m, &x, &anchor);
                        match self.link {
                            Link::Identity => mu + env.noise * draw_normal(&mut rng),
                            Link::Logistic => f64::from(u8::from(rng.random::<f64>() < mu)),
                        }
                    })
                    .collect();
                TraceRow { unit_id: format!("u{i}"), step: 0, x, state: None, next_state: None, terminal: true, action: a, propensity: probs[a], outcomes }
            })
            .collect()
    }

    /// Best arm at `x` by the direction-adjusted first metric.
    pub fn best_arm(&self, x: &[f64], anchor: &[f64]) -> usize {
        let s = self.metrics[0].direction.sign();
        let v: Vec<f64> = (0..self.arms.len()).map(|a| s * self.mean(a, 0, x, anchor)).collect();
        argmax(&v)
    }

    pub(super) fn oracle(&self, env: &EnvSpec, pi: Option<&dyn TargetPolicy>, t: f64, seed: u64) -> OracleValue {
        let (mean, anchor) = self.frame(env, t);
        let m = self.metrics.len();
        let per = ORACLE_SAMPLES / ORACLE_CHUNKS;
        let sums: Vec<Vec<f64>> = (0..ORACLE_CHUNKS)
            .into_par_iter()
            .map(|c| {
                let mut rng = seeded(derive_seed(seed, c as u64));
                let mut s = vec![0.0; m];
                for _ in 0..per {
                    let x = self.draw_context(&mean, &mut rng);
                    match pi {
                        Some(pi) => {
                            let p = pi.action_probs(&x);
                            for j in 0..m {
                                s[j] += p.iter().enumerate().map(|(a, p)| if *p > 0.0 { p * self.mean(a, j, &x, &anchor) } else { 0.0 }).sum::<f64>();
                            }
                        }
                        None => {
                            let a = self.best_arm(&x, &anchor);
                            for j in 0..m {
                                s[j] += self.mean(a, j, &x, &anchor);
                            }
                        }
                    }
                }
                s
            })
            .collect();
        let n = (per * ORACLE_CHUNKS) as f64;
        let values = (0..m).map(|j| sums.iter().map(|s| s[j]).sum::<f64>() / n).collect();
        OracleValue { values, monte_carlo_samples: Some(per * ORACLE_CHUNKS) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TauFn {
    Constant { value: f64 },
    /// `scale * sign(x[feature])`.
    Sign { feature: usize, scale: f64 },
    Linear { weights: Vec<f64>, bias: f64 },
}

/// Randomized experiment: `x ~ N(0, I)`, variant ~ Bernoulli(propensity),
/// outcome = `base(x) + variant * tau(x) + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HteEnv {
    pub dim: usize,
    pub propensity: f64,
    pub base_weights: Vec<f64>,
    pub base_bias: f64,
    pub tau: TauFn,
    pub metric: MetricDef,
}

impl HteEnv {
    pub(super) fn validate(&self) -> Result<(), SimError> {
        if !(self.propensity > 0.0 && self.propensity < 1.0) {
            return Err(SimError::BadEnv("propensity must be in (0, 1)".into()));
        }
        if self.base_weights.len() != self.dim {
            return Err(SimError::BadEnv("base weights must match dim".into()));
        }
        match &self.tau {
            TauFn::Sign { feature, .. } if *feature >= self.dim => Err(SimError::BadEnv("tau feature out of range".into())),
            TauFn::Linear { weights, .. } if weights.len() != self.dim => Err(SimError::BadEnv("tau weights must match dim".into())),
            _ => Ok(()),
        }
    }

    pub fn tau(&self, x: &[f64]) -> f64 {
        match &self.tau {
            TauFn::Constant { value } => *value,
            TauFn::Sign { feature, scale } => {
                if x[*feature] > 0.0 {
                    *scale
                } else if x[*feature] < 0.0 {
                    -scale
                } else {
                    0.0
                }
            }
            TauFn::Linear { weights, bias } => weights.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + bias,
        }
    }

    pub fn base(&self, x: &[f64]) -> f64 {
        self.base_weights.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.base_bias
    }

    /// Assignment used when logging the experiment itself.
    pub fn rct_probs(&self) -> Vec<f64> {
        vec![1.0 - self.propensity, self.propensity]
    }

    fn draw(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.dim).map(|_| draw_normal(rng)).collect()
    }

    pub(super) fn simulate(&self, noise: f64, pi: &dyn TargetPolicy, n: usize, seed: u64) -> Vec<TraceRow> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|i| {
                let x = self.draw(&mut rng);
                let probs = pi.action_probs(&x);
                let v = sample_index(&probs, rng.random::<f64>());
                let y = self.base(&x) + v as f64 * self.tau(&x) + noise * draw_normal(&mut rng);
                TraceRow { unit_id: format!("u{i}"), step: 0, x, state: None, next_state: None, terminal: true, action: v, propensity: probs[v], outcomes: vec![y] }
            })
            .collect()
    }

    pub(super) fn oracle(&self, pi: Option<&dyn TargetPolicy>, seed: u64) -> OracleValue {
        let per = ORACLE_SAMPLES / ORACLE_CHUNKS;
        let sign = self.metric.direction.sign();
        let total: f64 = (0..ORACLE_CHUNKS)
            .into_par_iter()
            .map(|c| {
                let mut rng = seeded(derive_seed(seed, c as u64));
                let mut s = 0.0;
                for _ in 0..per {
                    let x = self.draw(&mut rng);
                    let tau = self.tau(&x);
                    let treat = match pi {
                        Some(pi) => pi.action_probs(&x)[1],
                        None => f64::from(u8::from(sign * tau > 0.0)),
                    };
                    s += self.base(&x) + treat * tau;
                }
                s
            })
            .collect::<Vec<f64>>()
            .into_iter()
            .sum();
        OracleValue { values: vec![total / (per * ORACLE_CHUNKS) as f64], monte_carlo_samples: Some(per * ORACLE_CHUNKS) }
    }
}
