//! Self-contained model zoo: regularized linear/logistic regression,
//! multiclass softmax, histogram gradient-boosted trees, Platt calibration
//! and permutation feature importance.
//!
//! Training is single-threaded and deterministic under the seed; artifacts
//! are immutable values that serialize to versioned JSON.

mod calibration;
mod gbdt;
mod importance;
mod linear;
pub mod metrics;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use calibration::{calibrate, Platt};
pub use gbdt::{Node, Tree};
pub use importance::feature_importance;

/// Serialization format version for artifacts.
pub const ARTIFACT_FORMAT: u32 = 1;
/// Maximum tree depth accepted by [`Hyperparams::validate`].
pub const MAX_DEPTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Logistic,
    Linear,
    GbdtClassifier,
    GbdtRegressor,
    MulticlassSoftmax,
}

impl ModelKind {
    pub fn is_classifier(self) -> bool {
        matches!(self, ModelKind::Logistic | ModelKind::GbdtClassifier)
    }

    pub fn is_tree(self) -> bool {
        matches!(self, ModelKind::GbdtClassifier | ModelKind::GbdtRegressor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub l2: f64,
    /// Epochs for gradient-descent models, boosting rounds for trees.
    pub epochs: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub subsample: f64,
}

impl Hyperparams {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::GbdtClassifier | ModelKind::GbdtRegressor => {
                Self { learning_rate: 0.1, l2: 1.0, epochs: 100, max_depth: 3, min_leaf: 20, subsample: 1.0 }
            }
            _ => Self { learning_rate: 0.1, l2: 1e-4, epochs: 300, max_depth: 1, min_leaf: 1, subsample: 1.0 },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.l2 >= 0.0
            && (1..=MAX_DEPTH).contains(&self.max_depth)
            && self.min_leaf >= 1
            && self.subsample > 0.0
            && self.subsample <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::BadHyperparams(*self))
        }
    }

    /// Parameter-count proxy used to break ties between candidates.
    pub fn complexity(&self, kind: ModelKind, dim: usize) -> usize {
        if kind.is_tree() {
            self.epochs * ((1usize << (self.max_depth + 1)) - 1)
        } else {
            dim + 1
        }
    }
}

/// Dense design matrix with one label per row.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Self {
        assert_eq!(x.len(), y.len(), "rows and labels differ in length");
        Self { x, y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { x: idx.iter().map(|&i| self.x[i].clone()).collect(), y: idx.iter().map(|&i| self.y[i]).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelParams {
    Linear { weights: Vec<f64>, bias: f64 },
    Softmax { weights: Vec<Vec<f64>>, biases: Vec<f64> },
    Trees { base: f64, learning_rate: f64, trees: Vec<Tree> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetric {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training loss after each epoch / boosting round.
    pub losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationMetric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: u32,
    pub kind: ModelKind,
    pub dim: usize,
    pub params: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Platt>,
    /// Content hash of the preprocessing plan inputs were encoded with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_ref: Option<String>,
    pub hyperparams: Hyperparams,
    pub train_report: TrainReport,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Score(f64),
    Distribution(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("labels are degenerate: need at least 2 distinct classes")]
    DegenerateLabels,
    #[error("loss became non-finite at epoch {epoch} (last finite loss {last_loss})")]
    NonFiniteLoss { epoch: usize, last_loss: f64 },
    #[error("dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty training data")]
    EmptyData,
    #[error("invalid hyperparameters {0:?}")]
    BadHyperparams(Hyperparams),
    #[error("labels must be {0}")]
    BadLabels(&'static str),
    #[error("need at least {need} rows, got {have}")]
    TooFewRows { have: usize, need: usize },
}

/// Trains a model. `validation`, when given, is scored into the report.
pub fn train(kind: ModelKind, data: &Dataset, hp: &Hyperparams, seed: u64, validation: Option<&Dataset>) -> Result<ModelArtifact, ModelError> {
    hp.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyData);
    }
    let dim = data.dim();
    if let Some(bad) = data.x.iter().find(|r| r.len() != dim) {
        return Err(ModelError::DimensionMismatch { expected: dim, got: bad.len() });
    }
    match kind {
        ModelKind::Logistic | ModelKind::GbdtClassifier => {
            if data.y.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(ModelError::BadLabels("0 or 1"));
            }
            if distinct_labels(&data.y) < 2 {
                return Err(ModelError::DegenerateLabels);
            }
        }
        ModelKind::MulticlassSoftmax => {
            if data.y.iter().any(|&y| y < 0.0 || y.fract() != 0.0) {
                return Err(ModelError::BadLabels("nonnegative class indices"));
            }
            if distinct_labels(&data.y) < 2 {
                return Err(ModelError::DegenerateLabels);
            }
        }
        ModelKind::Linear | ModelKind::GbdtRegressor => {
            if data.y.iter().any(|y| !y.is_finite()) {
                return Err(ModelError::BadLabels("finite"));
            }
        }
    }
    let (params, losses) = match kind {
        ModelKind::Logistic => linear::fit_logistic(data, hp)?,
        ModelKind::Linear => linear::fit_linear(data, hp)?,
        ModelKind::MulticlassSoftmax => linear::fit_softmax(data, hp)?,
        ModelKind::GbdtClassifier => gbdt::fit(data, hp, seed, gbdt::Objective::Logistic)?,
        ModelKind::GbdtRegressor => gbdt::fit(data, hp, seed, gbdt::Objective::Squared)?,
    };
    let mut artifact = ModelArtifact {
        format: ARTIFACT_FORMAT,
        kind,
        dim,
        params,
        calibration: None,
        plan_ref: None,
        hyperparams: *hp,
        train_report: TrainReport { losses, validation: None },
        seed,
    };
    if let Some(v) = validation {
        artifact.train_report.validation = Some(artifact.validation_metric(v)?);
    }
    Ok(artifact)
}

fn distinct_labels(y: &[f64]) -> usize {
    let mut v: Vec<u64> = y.iter().map(|f| f.to_bits()).collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Keeps probabilities strictly inside (0, 1).
pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-15, 1.0 - 1e-15)
}

pub(crate) fn logit(p: f64) -> f64 {
    let p = clamp_prob(p);
    (p / (1.0 - p)).ln()
}

pub(crate) fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl ModelArtifact {
    /// Raw model output before calibration: a logit for classifiers, a value
    /// for regressors.
    fn raw(&self, x: &[f64]) -> f64 {
        match &self.params {
            ModelParams::Linear { weights, bias } => dot(weights, x) + bias,
            ModelParams::Trees { base, learning_rate, trees } => base + learning_rate * trees.iter().map(|t| t.predict(x)).sum::<f64>(),
            ModelParams::Softmax { .. } => unreachable!("softmax has no scalar output"),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction, ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(match (&self.params, self.kind) {
            (ModelParams::Softmax { weights, biases }, _) => {
                let logits: Vec<f64> = weights.iter().zip(biases).map(|(w, b)| dot(w, x) + b).collect();
                Prediction::Distribution(softmax(&logits))
            }
            (_, kind) if kind.is_classifier() => {
                let z = self.raw(x);
                let z = match &self.calibration {
                    Some(c) => c.a * z + c.b,
                    None => z,
                };
                Prediction::Score(clamp_prob(sigmoid(z)))
            }
            _ => Prediction::Score(self.raw(x)),
        })
    }

    /// Scalar prediction; for multiclass models the probability of class 1.
    pub fn score(&self, x: &[f64]) -> Result<f64, ModelError> {
        Ok(match self.predict(x)? {
            Prediction::Score(s) => s,
            Prediction::Distribution(p) => p.get(1).copied().unwrap_or(0.0),
        })
    }

    pub fn scores(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        xs.iter().map(|x| self.score(x)).collect()
    }

    /// Validation metric used by the report: AUC for binary classifiers,
    /// RMSE for regressors, accuracy for multiclass.
    pub fn validation_metric(&self, data: &Dataset) -> Result<ValidationMetric, ModelError> {
        let (name, value) = match self.kind {
            ModelKind::Logistic | ModelKind::GbdtClassifier => ("auc", metrics::auc(&self.scores(&data.x)?, &data.y)),
            ModelKind::Linear | ModelKind::GbdtRegressor => ("rmse", metrics::rmse(&self.scores(&data.x)?, &data.y)),
            ModelKind::MulticlassSoftmax => {
                let mut hits = 0usize;
                for (x, &y) in data.x.iter().zip(&data.y) {
                    if let Prediction::Distribution(p) = self.predict(x)? {
                        if metrics::argmax(&p) == y as usize {
                            hits += 1;
                        }
                    }
                }
                ("accuracy", hits as f64 / data.len().max(1) as f64)
            }
        };
        Ok(ValidationMetric { name: name.to_string(), value })
    }

    /// Offline loss on labeled rows: log loss for classifiers, mean squared
    /// error for regressors, cross-entropy for multiclass.
    pub fn loss(&self, data: &Dataset) -> Result<f64, ModelError> {
        let n = data.len().max(1) as f64;
        let mut total = 0.0;
        for (x, &y) in data.x.iter().zip(&data.y) {
            total += match self.predict(x)? {
                Prediction::Score(p) if self.kind.is_classifier() => -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()),
                Prediction::Score(v) => (v - y).powi(2),
                Prediction::Distribution(p) => -clamp_prob(p[y as usize]).ln(),
            };
        }
        Ok(total / n)
    }

    /// Number of fitted parameters (weights or tree nodes).
    pub fn parameter_count(&self) -> usize {
        match &self.params {
            ModelParams::Linear { weights, .. } => weights.len() + 1,
            ModelParams::Softmax { weights, biases } => weights.iter().map(Vec::len).sum::<usize>() + biases.len(),
            ModelParams::Trees { trees, .. } => 1 + trees.iter().map(|t| t.nodes.len()).sum::<usize>(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("artifact serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Hex SHA-256 of the serialized artifact.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use testdata::*;

    #[test]
    fn separable_logistic_reaches_high_accuracy() {
        let data = separable(400, 1);
        let hp = Hyperparams { learning_rate: 0.1, epochs: 500, ..Hyperparams::default_for(ModelKind::Logistic) };
        let m = train(ModelKind::Logistic, &data, &hp, 0, None).unwrap();
        let acc = data.x.iter().zip(&data.y).filter(|(x, y)| (m.score(x).unwrap() >= 0.5) == (**y == 1.0)).count() as f64 / data.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn single_class_is_degenerate() {
        let data = Dataset::new(vec![vec![1.0], vec![2.0]], vec![1.0, 1.0]);
        for kind in [ModelKind::Logistic, ModelKind::GbdtClassifier, ModelKind::MulticlassSoftmax] {
            assert_eq!(train(kind, &data, &Hyperparams::default_for(kind), 0, None).unwrap_err(), ModelError::DegenerateLabels);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = xor(300, 2);
        for kind in [ModelKind::Logistic, ModelKind::GbdtClassifier] {
            let hp = Hyperparams { subsample: 0.7, ..Hyperparams::default_for(kind) };
            let a = train(kind, &data, &hp, 11, None).unwrap();
            let b = train(kind, &data, &hp, 11, None).unwrap();
            assert_eq!(a.to_json(), b.to_json());
        }
    }

    #[test]
    fn zero_weight_logistic_predicts_half() {
        let m = ModelArtifact {
            format: ARTIFACT_FORMAT,
            kind: ModelKind::Logistic,
            dim: 3,
            params: ModelParams::Linear { weights: vec![0.0; 3], bias: 0.0 },
            calibration: None,
            plan_ref: None,
            hyperparams: Hyperparams::default_for(ModelKind::Logistic),
            train_report: TrainReport::default(),
            seed: 0,
        };
        assert_eq!(m.score(&[5.0, -2.0, 9.0]).unwrap(), 0.5);
        assert!(matches!(m.predict(&[1.0]), Err(ModelError::DimensionMismatch { expected: 3, got: 1 })));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let m = ModelArtifact {
            format: ARTIFACT_FORMAT,
            kind: ModelKind::MulticlassSoftmax,
            dim: 2,
            params: ModelParams::Softmax { weights: vec![vec![0.0; 2]; 3], biases: vec![0.0; 3] },
            calibration: None,
            plan_ref: None,
            hyperparams: Hyperparams::default_for(ModelKind::MulticlassSoftmax),
            train_report: TrainReport::default(),
            seed: 0,
        };
        match m.predict(&[1.0, 2.0]).unwrap() {
            Prediction::Distribution(p) => {
                for v in p {
                    assert!((v - 1.0 / 3.0).abs() < 1e-12);
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn validation_metric_matches_recomputation() {
        let data = xor(400, 3);
        let (tr, va) = (data.subset(&(0..300).collect::<Vec<_>>()), data.subset(&(300..400).collect::<Vec<_>>()));
        for kind in [ModelKind::Logistic, ModelKind::GbdtClassifier] {
            let m = train(kind, &tr, &Hyperparams::default_for(kind), 5, Some(&va)).unwrap();
            let stored = m.train_report.validation.clone().unwrap().value;
            let recomputed = m.validation_metric(&va).unwrap().value;
            assert!((stored - recomputed).abs() <= 1e-9);
        }
    }

    #[test]
    fn multiclass_probabilities_sum_to_one() {
        let data = Dataset::new(
            (0..90).map(|i| vec![(i % 3) as f64, (i as f64 * 0.37).sin()]).collect(),
            (0..90).map(|i| (i % 3) as f64).collect(),
        );
        let m = train(ModelKind::MulticlassSoftmax, &data, &Hyperparams::default_for(ModelKind::MulticlassSoftmax), 0, Some(&data)).unwrap();
        for x in &data.x {
            let Prediction::Distribution(p) = m.predict(x).unwrap() else { panic!() };
            assert_eq!(p.len(), 3);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(p.iter().all(|v| *v >= 0.0));
        }
        assert!(m.train_report.validation.unwrap().value > 0.9);
    }

    #[test]
    fn divergence_aborts() {
        let data = Dataset::new((0..50).map(|i| vec![i as f64 * 1e3]).collect(), (0..50).map(|i| i as f64 * 1e3).collect());
        let hp = Hyperparams { learning_rate: 10.0, epochs: 200, ..Hyperparams::default_for(ModelKind::Linear) };
        assert!(matches!(train(ModelKind::Linear, &data, &hp, 0, None), Err(ModelError::NonFiniteLoss { .. })));
    }

    #[test]
    fn artifact_json_roundtrip_is_exact() {
        let m = train(ModelKind::GbdtRegressor, &xor(200, 4), &Hyperparams::default_for(ModelKind::GbdtRegressor), 0, None).unwrap();
        let back = ModelArtifact::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
    }

    #[test]
    fn classifier_scores_stay_inside_unit_interval() {
        let m = train(ModelKind::Logistic, &separable(200, 9), &Hyperparams { epochs: 2000, learning_rate: 1.0, ..Hyperparams::default_for(ModelKind::Logistic) }, 0, None).unwrap();
        for x in [[1e6, 1e6], [-1e6, -1e6]] {
            let s = m.score(&x).unwrap();
            assert!(s > 0.0 && s < 1.0);
        }
    }
}
