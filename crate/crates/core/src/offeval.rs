//! Counterfactual policy evaluation on logged bandit feedback: IPS,
//! self-normalized IPS and doubly robust estimators with percentile
//! bootstrap intervals.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prep::quantile_sorted;
use crate::rng::{derive_seed, seeded};

/// Behavior propensities are clipped from below at this value.
pub const PROPENSITY_FLOOR: f64 = 0.01;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const MIN_BOOTSTRAP_ROWS: usize = 30;
/// ESS below this fraction of n raises the `low_ess` diagnostic.
pub const LOW_ESS_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedRow {
    pub x: Vec<f64>,
    pub action: usize,
    pub propensity: f64,
    /// One value per metric.
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedBanditDataset {
    pub n_actions: usize,
    pub metrics: Vec<String>,
    pub rows: Vec<LoggedRow>,
}

/// Action distribution of the policy being evaluated.
pub trait TargetPolicy: Sync {
    fn action_probs(&self, x: &[f64]) -> Vec<f64>;
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> TargetPolicy for F {
    fn action_probs(&self, x: &[f64]) -> Vec<f64> {
        self(x)
    }
}

/// Per-metric outcome predictions `q(x, a)` for the doubly robust estimator.
pub trait OutcomeModel: Sync {
    fn predict(&self, x: &[f64], action: usize) -> Vec<f64>;
}

impl<F: Fn(&[f64], usize) -> Vec<f64> + Sync> OutcomeModel for F {
    fn predict(&self, x: &[f64], action: usize) -> Vec<f64> {
        self(x, action)
    }
}

/// The outcome model that predicts zero for everything.
pub struct ZeroModel(pub usize);

impl OutcomeModel for ZeroModel {
    fn predict(&self, _: &[f64], _: usize) -> Vec<f64> {
        vec![0.0; self.0]
    }
}

/// Per-(action, metric) mean logged outcome. A deliberately plain reward
/// model: the doubly robust estimate stays unbiased whatever it predicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMeans(pub Vec<Vec<f64>>);

impl ActionMeans {
    pub fn fit(data: &LoggedBanditDataset) -> Self {
        let m = data.metrics.len();
        let mut sums = vec![vec![0.0; m]; data.n_actions];
        let mut counts = vec![0usize; data.n_actions];
        for r in &data.rows {
            counts[r.action] += 1;
            sums[r.action].iter_mut().zip(&r.rewards).for_each(|(s, v)| *s += v);
        }
        Self(sums.into_iter().zip(counts).map(|(s, c)| s.into_iter().map(|v| if c > 0 { v / c as f64 } else { 0.0 }).collect()).collect())
    }
}

impl OutcomeModel for ActionMeans {
    fn predict(&self, _: &[f64], action: usize) -> Vec<f64> {
        self.0[action].clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Ips,
    Snips,
    Dr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub max_weight: f64,
    pub clipped_fraction: f64,
    pub low_ess: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub level: f64,
    pub replicates: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub estimator: Estimator,
    pub metrics: Vec<String>,
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<ConfidenceInterval>,
    pub ess: f64,
    pub n: usize,
    pub diagnostics: Diagnostics,
}

impl PolicyEvaluation {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().position(|m| m == name).map(|i| self.estimate[i])
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OffEvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("row {0} has zero logged propensity")]
    ZeroPropensity(usize),
    #[error("row {0} has a propensity outside (0, 1]")]
    InvalidPropensity(usize),
    #[error("target policy puts zero weight on every logged action")]
    AllWeightsZero,
    #[error("need at least {need} rows, got {have}")]
    TooFewRows { have: usize, need: usize },
    #[error("row {row}: {what}")]
    DimensionMismatch { row: usize, what: String },
}

/// Per-row quantities every estimator is built from.
struct Terms {
    w: Vec<f64>,
    /// `w_i * r_i` per metric.
    wr: Vec<Vec<f64>>,
    /// Doubly robust per-row contribution per metric.
    dr: Option<Vec<Vec<f64>>>,
    clipped: usize,
}

fn terms(data: &LoggedBanditDataset, pi: &dyn TargetPolicy, q: Option<&dyn OutcomeModel>) -> Result<Terms, OffEvalError> {
    if data.rows.is_empty() {
        return Err(OffEvalError::EmptyDataset);
    }
    let m = data.metrics.len();
    let k = data.n_actions;
    let mut t = Terms { w: Vec::with_capacity(data.rows.len()), wr: Vec::new(), dr: q.map(|_| Vec::new()), clipped: 0 };
    for (i, row) in data.rows.iter().enumerate() {
        if row.propensity == 0.0 {
            return Err(OffEvalError::ZeroPropensity(i));
        }
        if !(row.propensity > 0.0 && row.propensity <= 1.0) {
            return Err(OffEvalError::InvalidPropensity(i));
        }
        if row.rewards.len() != m || row.action >= k {
            return Err(OffEvalError::DimensionMismatch { row: i, what: "rewards or action out of range".into() });
        }
        let probs = pi.action_probs(&row.x);
        if probs.len() != k {
            return Err(OffEvalError::DimensionMismatch { row: i, what: format!("policy returned {} probabilities for {k} actions", probs.len()) });
        }
        if row.propensity < PROPENSITY_FLOOR {
            t.clipped += 1;
        }
        let w = probs[row.action] / row.propensity.max(PROPENSITY_FLOOR);
        t.w.push(w);
        t.wr.push(row.rewards.iter().map(|r| w * r).collect());
        if let (Some(q), Some(dr)) = (q, t.dr.as_mut()) {
            let qa: Vec<Vec<f64>> = (0..k).map(|a| q.predict(&row.x, a)).collect();
            let contrib = (0..m)
                .map(|j| {
                    let direct: f64 = (0..k).map(|a| probs[a] * qa[a][j]).sum();
                    direct + w * (row.rewards[j] - qa[row.action][j])
                })
                .collect();
            dr.push(contrib);
        }
    }
    Ok(t)
}

fn mean_cols(rows: &[Vec<f64>], idx: impl Iterator<Item = usize> + Clone, m: usize) -> Vec<f64> {
    let mut s = vec![0.0; m];
    let mut n = 0usize;
    for i in idx {
        for j in 0..m {
            s[j] += rows[i][j];
        }
        n += 1;
    }
    s.into_iter().map(|v| v / n as f64).collect()
}

fn point(est: Estimator, t: &Terms, idx: impl Iterator<Item = usize> + Clone, m: usize) -> Result<Vec<f64>, OffEvalError> {
    match est {
        Estimator::Ips => Ok(mean_cols(&t.wr, idx, m)),
        Estimator::Dr => Ok(mean_cols(t.dr.as_ref().expect("dr terms"), idx, m)),
        Estimator::Snips => {
            let sw: f64 = idx.clone().map(|i| t.w[i]).sum();
            if sw <= 0.0 {
                return Err(OffEvalError::AllWeightsZero);
            }
            let mut s = vec![0.0; m];
            for i in idx {
                for j in 0..m {
                    s[j] += t.wr[i][j];
                }
            }
            Ok(s.into_iter().map(|v| v / sw).collect())
        }
    }
}

fn evaluate_terms(est: Estimator, data: &LoggedBanditDataset, t: &Terms) -> Result<PolicyEvaluation, OffEvalError> {
    let n = data.rows.len();
    let m = data.metrics.len();
    let estimate = point(est, t, 0..n, m)?;
    let sw: f64 = t.w.iter().sum();
    let sw2: f64 = t.w.iter().map(|w| w * w).sum();
    let ess = if sw2 > 0.0 { sw * sw / sw2 } else { 0.0 };
    let std_error = (0..m)
        .map(|j| match est {
            Estimator::Snips => {
                let v: f64 = (0..n).map(|i| (t.w[i] * (data.rows[i].rewards[j] - estimate[j])).powi(2)).sum();
                v.sqrt() / sw
            }
            _ => {
                let col: Vec<f64> = match est {
                    Estimator::Dr => t.dr.as_ref().expect("dr terms").iter().map(|r| r[j]).collect(),
                    _ => t.wr.iter().map(|r| r[j]).collect(),
                };
                let var = col.iter().map(|v| (v - estimate[j]).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
                (var / n as f64).sqrt()
            }
        })
        .collect();
    Ok(PolicyEvaluation {
        estimator: est,
        metrics: data.metrics.clone(),
        estimate,
        std_error,
        ci: None,
        ess,
        n,
        diagnostics: Diagnostics {
            max_weight: t.w.iter().copied().fold(0.0, f64::max),
            clipped_fraction: t.clipped as f64 / n as f64,
            low_ess: ess < LOW_ESS_FRACTION * n as f64,
        },
    })
}

pub fn ips(data: &LoggedBanditDataset, pi: &dyn TargetPolicy) -> Result<PolicyEvaluation, OffEvalError> {
    evaluate_terms(Estimator::Ips, data, &terms(data, pi, None)?)
}

pub fn snips(data: &LoggedBanditDataset, pi: &dyn TargetPolicy) -> Result<PolicyEvaluation, OffEvalError> {
    evaluate_terms(Estimator::Snips, data, &terms(data, pi, None)?)
}

pub fn doubly_robust(data: &LoggedBanditDataset, pi: &dyn TargetPolicy, q: &dyn OutcomeModel) -> Result<PolicyEvaluation, OffEvalError> {
    evaluate_terms(Estimator::Dr, data, &terms(data, pi, Some(q))?)
}

fn bootstrap_terms(est: Estimator, data: &LoggedBanditDataset, t: &Terms, b: usize, seed: u64) -> Result<ConfidenceInterval, OffEvalError> {
    let n = data.rows.len();
    if n < MIN_BOOTSTRAP_ROWS {
        return Err(OffEvalError::TooFewRows { have: n, need: MIN_BOOTSTRAP_ROWS });
    }
    let m = data.metrics.len();
    let reps: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = seeded(derive_seed(seed, r as u64));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            point(est, t, idx.iter().copied(), m).ok()
        })
        .collect();
    let reps: Vec<Vec<f64>> = reps.into_iter().flatten().collect();
    if reps.is_empty() {
        return Err(OffEvalError::AllWeightsZero);
    }
    let full = point(est, t, 0..n, m)?;
    let mut lo = Vec::with_capacity(m);
    let mut hi = Vec::with_capacity(m);
    for j in 0..m {
        let mut col: Vec<f64> = reps.iter().map(|r| r[j]).collect();
        col.sort_by(f64::total_cmp);
        lo.push(quantile_sorted(&col, 0.025).min(full[j]));
        hi.push(quantile_sorted(&col, 0.975).max(full[j]));
    }
    Ok(ConfidenceInterval { level: 0.95, replicates: b, lo, hi })
}

/// 95% percentile bootstrap interval over rows, widened if needed so it
/// contains the full-sample estimate. `q` is required for [`Estimator::Dr`].
pub fn bootstrap_ci(est: Estimator, data: &LoggedBanditDataset, pi: &dyn TargetPolicy, q: Option<&dyn OutcomeModel>, b: usize, seed: u64) -> Result<ConfidenceInterval, OffEvalError> {
    let q = outcome_for(est, data, q);
    bootstrap_terms(est, data, &terms(data, pi, q.as_deref())?, b, seed)
}

fn outcome_for<'a>(est: Estimator, data: &LoggedBanditDataset, q: Option<&'a dyn OutcomeModel>) -> Option<Box<dyn OutcomeModel + 'a>> {
    match (est, q) {
        (Estimator::Dr, Some(q)) => Some(Box::new(move |x: &[f64], a: usize| q.predict(x, a))),
        (Estimator::Dr, None) => Some(Box::new(ZeroModel(data.metrics.len()))),
        _ => None,
    }
}

/// Point estimate plus bootstrap interval in one pass.
pub fn evaluate(est: Estimator, data: &LoggedBanditDataset, pi: &dyn TargetPolicy, q: Option<&dyn OutcomeModel>, b: usize, seed: u64) -> Result<PolicyEvaluation, OffEvalError> {
    let q = outcome_for(est, data, q);
    let t = terms(data, pi, q.as_deref())?;
    let mut ev = evaluate_terms(est, data, &t)?;
    ev.ci = Some(bootstrap_terms(est, data, &t, b, seed)?);
    Ok(ev)
}
