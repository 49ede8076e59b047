//! Heterogeneous treatment effects from randomized experiments.
//!
//! A/B test results become training labels for meta-learners. The T-learner
//! fits one outcome model per arm and takes the difference; the X-learner
//! additionally regresses imputed individual effects and blends the two
//! effect models with the assignment propensity. Uplift estimates feed an
//! assignment policy and a segment report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{self, Dataset, Hyperparams, ModelArtifact, ModelError, ModelKind, Prediction};
use crate::policy::{DecisionPolicy, ModelOutputs};
use crate::rng::derive_seed;
use crate::simlab::Trace;
use crate::usecase::Direction;

pub const MIN_ROWS_PER_ARM: usize = 100;
pub const MIN_ROWS_PER_SEGMENT: usize = 20;
pub const TOP_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RctRow {
    pub x: Vec<f64>,
    /// 0 = control, 1 = treatment.
    pub variant: usize,
    pub outcomes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RctDataset {
    pub features: Vec<String>,
    pub metrics: Vec<String>,
    /// Probability of assignment to treatment, fixed by the experiment.
    pub propensity: f64,
    pub rows: Vec<RctRow>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HteError {
    #[error("no rows in arm {0}")]
    MissingArm(usize),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("arm {arm} has {have} rows, need {need}")]
    TooFewRows { arm: usize, have: usize, need: usize },
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("assignment propensity must be in (0, 1), got {0}")]
    BadPropensity(f64),
    #[error("variant must be 0 or 1, got {0}")]
    BadVariant(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl RctDataset {
    /// An experiment trace from a two-arm environment; action 1 is treatment.
    pub fn from_trace(trace: &Trace, propensity: f64) -> Self {
        Self {
            features: trace.feature_names(),
            metrics: trace.metrics.clone(),
            propensity,
            rows: trace.rows.iter().map(|r| RctRow { x: r.x.clone(), variant: r.action, outcomes: r.outcomes.clone() }).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn validate(&self) -> Result<(), HteError> {
        if !(self.propensity > 0.0 && self.propensity < 1.0) {
            return Err(HteError::BadPropensity(self.propensity));
        }
        for r in &self.rows {
            if r.variant > 1 {
                return Err(HteError::BadVariant(r.variant));
            }
            if r.x.len() != self.dim() {
                return Err(HteError::DimensionMismatch { expected: self.dim(), got: r.x.len() });
            }
        }
        for arm in 0..2 {
            if !self.rows.iter().any(|r| r.variant == arm) {
                return Err(HteError::MissingArm(arm));
            }
        }
        Ok(())
    }

    fn metric_index(&self, metric: &str) -> Result<usize, HteError> {
        self.metrics.iter().position(|m| m == metric).ok_or_else(|| HteError::UnknownMetric(metric.to_string()))
    }

    fn arm(&self, arm: usize, m: usize) -> Dataset {
        let rows: Vec<&RctRow> = self.rows.iter().filter(|r| r.variant == arm).collect();
        Dataset::new(rows.iter().map(|r| r.x.clone()).collect(), rows.iter().map(|r| r.outcomes[m]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearnerKind {
    T,
    X,
}

/// Base learner for the arm outcome models. Effect models of the X-learner
/// use the matching regressor: GBDT for GBDT, linear otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseLearner {
    pub kind: ModelKind,
    pub hyperparams: Hyperparams,
}

impl Default for BaseLearner {
    fn default() -> Self {
        Self { kind: ModelKind::GbdtRegressor, hyperparams: Hyperparams::default_for(ModelKind::GbdtRegressor) }
    }
}

impl BaseLearner {
    fn effect_kind(&self) -> ModelKind {
        if self.kind.is_tree() {
            ModelKind::GbdtRegressor
        } else {
            ModelKind::Linear
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpliftModel {
    pub kind: LearnerKind,
    pub metric: String,
    pub dim: usize,
    pub propensity: f64,
    pub mu0: ModelArtifact,
    pub mu1: ModelArtifact,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau0: Option<ModelArtifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau1: Option<ModelArtifact>,
    /// Weight on `tau0` in the X-learner blend; equals the propensity.
    pub blend: f64,
}

fn scalar(m: &ModelArtifact, x: &[f64]) -> Result<f64, ModelError> {
    match m.predict(x)? {
        Prediction::Score(v) => Ok(v),
        Prediction::Distribution(p) => Ok(p.get(1).copied().unwrap_or(0.0)),
    }
}

fn scalars(m: &ModelArtifact, xs: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
    xs.iter().map(|x| scalar(m, x)).collect()
}

/// Fits a T- or X-learner for `metric`.
pub fn fit_meta_learner(kind: LearnerKind, data: &RctDataset, metric: &str, base: &BaseLearner, seed: u64) -> Result<UpliftModel, HteError> {
    data.validate()?;
    let m = data.metric_index(metric)?;
    let arms = [data.arm(0, m), data.arm(1, m)];
    for (arm, d) in arms.iter().enumerate() {
        if d.len() < MIN_ROWS_PER_ARM {
            return Err(HteError::TooFewRows { arm, have: d.len(), need: MIN_ROWS_PER_ARM });
        }
    }
    let mu0 = models::train(base.kind, &arms[0], &base.hyperparams, derive_seed(seed, 0), None)?;
    let mu1 = models::train(base.kind, &arms[1], &base.hyperparams, derive_seed(seed, 1), None)?;
    let (tau0, tau1) = match kind {
        LearnerKind::T => (None, None),
        LearnerKind::X => {
            let ek = base.effect_kind();
            let hp = if ek == base.kind { base.hyperparams.clone() } else { Hyperparams::default_for(ek) };
            // Imputed effects: treated rows against the control model, control
            // rows against the treated model.
            let d1: Vec<f64> = scalars(&mu0, &arms[1].x)?.iter().zip(&arms[1].y).map(|(m0, y)| y - m0).collect();
            let d0: Vec<f64> = scalars(&mu1, &arms[0].x)?.iter().zip(&arms[0].y).map(|(m1, y)| m1 - y).collect();
            let t1 = models::train(ek, &Dataset::new(arms[1].x.clone(), d1), &hp, derive_seed(seed, 3), None)?;
            let t0 = models::train(ek, &Dataset::new(arms[0].x.clone(), d0), &hp, derive_seed(seed, 2), None)?;
            (Some(t0), Some(t1))
        }
    };
    Ok(UpliftModel { kind, metric: metric.to_string(), dim: data.dim(), propensity: data.propensity, mu0, mu1, tau0, tau1, blend: data.propensity })
}

impl UpliftModel {
    /// Estimated treatment effect at `x` in metric units.
    pub fn predict_uplift(&self, x: &[f64]) -> Result<f64, HteError> {
        if x.len() != self.dim {
            return Err(HteError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(match (&self.tau0, &self.tau1) {
            (Some(t0), Some(t1)) => self.blend * scalar(t0, x)? + (1.0 - self.blend) * scalar(t1, x)?,
            _ => scalar(&self.mu1, x)? - scalar(&self.mu0, x)?,
        })
    }

    /// Arm probabilities `[control, treatment]` of an assignment policy
    /// derived from this model.
    pub fn assignment_probs(&self, policy: &DecisionPolicy, x: &[f64]) -> Result<Vec<f64>, HteError> {
        let tau = self.predict_uplift(x)?;
        Ok(policy.action_probs(&ModelOutputs::Score(tau)).expect("uplift policies take a score"))
    }
}

pub fn predict_uplift(model: &UpliftModel, x: &[f64]) -> Result<f64, HteError> {
    model.predict_uplift(x)
}

/// Treat iff the direction-adjusted uplift exceeds `cost_threshold`.
pub fn derive_assignment_policy(model: &UpliftModel, cost_threshold: f64, direction: Direction, epsilon: f64) -> DecisionPolicy {
    DecisionPolicy::uplift(cost_threshold, direction.sign(), epsilon).with_version(format!("uplift-{:?}-{}-{cost_threshold}-eps{epsilon}", model.kind, model.metric))
}

/// Depth-3 tree imitating the greedy decisions of an assignment policy on
/// `xs`, readable as a heuristic rule set. Its score is the treat rate.
#[cfg(feature = "distill")]
pub fn distill_policy(model: &UpliftModel, policy: &DecisionPolicy, xs: &[Vec<f64>], seed: u64) -> Result<ModelArtifact, HteError> {
    let y = xs
        .iter()
        .map(|x| {
            let treat = policy.greedy(&ModelOutputs::Score(model.predict_uplift(x)?)).expect("uplift policies take a score") == 1;
            Ok(f64::from(u8::from(treat)))
        })
        .collect::<Result<Vec<_>, HteError>>()?;
    let hp = Hyperparams { learning_rate: 1.0, epochs: 1, max_depth: 3, min_leaf: 20, subsample: 1.0, ..Hyperparams::default_for(ModelKind::GbdtClassifier) };
    Ok(models::train(ModelKind::GbdtClassifier, &Dataset::new(xs.to_vec(), y), &hp, seed, None)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub n: usize,
    pub mean_uplift: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub mean_treated: f64,
    pub mean_control: f64,
    /// Difference of arm means within the segment.
    pub empirical_lift: f64,
    pub lift_std_error: f64,
    /// Features whose segment mean departs most from the population, in
    /// population standard deviations.
    pub top_features: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub metric: String,
    pub segments: Vec<Segment>,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var)
}

/// Buckets rows into equal-size segments of ascending estimated uplift.
pub fn segment_analysis(model: &UpliftModel, data: &RctDataset, n_segments: usize) -> Result<SegmentReport, HteError> {
    data.validate()?;
    let m = data.metric_index(&model.metric)?;
    let need = n_segments.max(1) * MIN_ROWS_PER_SEGMENT;
    if data.rows.len() < need {
        return Err(HteError::TooFewRows { arm: 2, have: data.rows.len(), need });
    }
    let tau: Vec<f64> = data.rows.iter().map(|r| model.predict_uplift(&r.x)).collect::<Result<_, _>>()?;
    let mut order: Vec<usize> = (0..tau.len()).collect();
    order.sort_by(|&a, &b| tau[a].total_cmp(&tau[b]).then(a.cmp(&b)));
    let d = data.dim();
    let pop: Vec<(f64, f64)> = (0..d).map(|j| mean_var(&data.rows.iter().map(|r| r.x[j]).collect::<Vec<_>>())).collect();
    let n = order.len();
    let segments = (0..n_segments)
        .map(|s| {
            let idx = &order[s * n / n_segments..(s + 1) * n / n_segments];
            let mean_uplift = idx.iter().map(|&i| tau[i]).sum::<f64>() / idx.len() as f64;
            let arm = |a: usize| idx.iter().filter(|&&i| data.rows[i].variant == a).map(|&i| data.rows[i].outcomes[m]).collect::<Vec<_>>();
            let (yt, yc) = (arm(1), arm(0));
            let (mt, vt) = if yt.is_empty() { (f64::NAN, 0.0) } else { mean_var(&yt) };
            let (mc, vc) = if yc.is_empty() { (f64::NAN, 0.0) } else { mean_var(&yc) };
            let mut z: Vec<(String, f64)> = (0..d)
                .map(|j| {
                    let seg_mean = idx.iter().map(|&i| data.rows[i].x[j]).sum::<f64>() / idx.len() as f64;
                    let sd = pop[j].1.sqrt();
                    (data.features[j].clone(), if sd > 0.0 { (seg_mean - pop[j].0) / sd } else { 0.0 })
                })
                .collect();
            z.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(&b.0)));
            z.truncate(TOP_FEATURES);
            Segment {
                index: s,
                n: idx.len(),
                mean_uplift,
                n_treated: yt.len(),
                n_control: yc.len(),
                mean_treated: mt,
                mean_control: mc,
                empirical_lift: mt - mc,
                lift_std_error: (vt / yt.len().max(1) as f64 + vc / yc.len().max(1) as f64).sqrt(),
                top_features: z,
            }
        })
        .collect();
    Ok(SegmentReport { metric: model.metric.clone(), segments })
}
