use serde::{Deserialize, Serialize};

use super::{metrics::ece, sigmoid, Dataset, ModelArtifact, ModelError};

/// Platt layer applied to the classifier logit: `p = sigmoid(a * z + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Platt {
    pub a: f64,
    pub b: f64,
}

impl Platt {
    pub const IDENTITY: Platt = Platt { a: 1.0, b: 0.0 };
}

fn nll(z: &[f64], y: &[f64], a: f64, b: f64) -> f64 {
    z.iter()
        .zip(y)
        .map(|(&z, &y)| {
            let t = a * z + b;
            let sp = if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
            sp - y * t
        })
        .sum()
}

/// Newton's method on the log loss of `sigmoid(a z + b)`, with step halving.
fn fit_platt(z: &[f64], y: &[f64]) -> Platt {
    let (mut a, mut b) = (1.0, 0.0);
    let mut cur = nll(z, y, a, b);
    for _ in 0..100 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 1e-9, 0.0, 1e-9);
        for (&z, &y) in z.iter().zip(y) {
            let p = sigmoid(a * z + b);
            let r = p - y;
            let w = p * (1.0 - p);
            ga += r * z;
            gb += r;
            haa += w * z * z;
            hab += w * z;
            hbb += w;
        }
        let det = haa * hbb - hab * hab;
        if det.abs() < 1e-300 {
            break;
        }
        let da = (hbb * ga - hab * gb) / det;
        let db = (haa * gb - hab * ga) / det;
        let mut step = 1.0;
        let mut improved = false;
        while step > 1e-10 {
            let (na, nb) = (a - step * da, b - step * db);
            let l = nll(z, y, na, nb);
            if l <= cur {
                improved = cur - l > 1e-12 * cur.abs().max(1.0);
                a = na;
                b = nb;
                cur = l;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Platt { a, b }
}

/// Fits a Platt layer on `validation`. If the fitted layer would raise the
/// expected calibration error, the identity layer is kept instead.
pub fn calibrate(artifact: &ModelArtifact, validation: &Dataset) -> Result<ModelArtifact, ModelError> {
    if !artifact.kind.is_classifier() {
        return Err(ModelError::BadLabels("from a binary classifier"));
    }
    let pos = validation.y.iter().filter(|&&y| y == 1.0).count();
    if pos == 0 || pos == validation.len() {
        return Err(ModelError::DegenerateLabels);
    }
    let mut base = artifact.clone();
    base.calibration = None;
    let z: Vec<f64> = validation.x.iter().map(|x| base.predict(x).map(|_| base.raw(x))).collect::<Result<_, _>>()?;
    if z.iter().all(|v| *v == z[0]) {
        return Err(ModelError::DegenerateLabels);
    }
    let before = ece(&artifact.scores(&validation.x)?, &validation.y);
    let platt = fit_platt(&z, &validation.y);
    base.calibration = Some(platt);
    let after = ece(&base.scores(&validation.x)?, &validation.y);
    if after > before + 1e-6 {
        base.calibration = Some(Platt::IDENTITY);
        if ece(&base.scores(&validation.x)?, &validation.y) > before + 1e-6 {
            base.calibration = artifact.calibration;
        }
    }
    Ok(base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{logit, Hyperparams, ModelKind, ModelParams, TrainReport, ARTIFACT_FORMAT};
    use crate::rng::seeded;
    use rand::Rng;

    /// Logistic artifact whose logit equals its single input.
    fn passthrough() -> ModelArtifact {
        ModelArtifact {
            format: ARTIFACT_FORMAT,
            kind: ModelKind::Logistic,
            dim: 1,
            params: ModelParams::Linear { weights: vec![1.0], bias: 0.0 },
            calibration: None,
            plan_ref: None,
            hyperparams: Hyperparams::default_for(ModelKind::Logistic),
            train_report: TrainReport::default(),
            seed: 0,
        }
    }

    fn sample(n: usize, seed: u64, distort: impl Fn(f64) -> f64) -> Dataset {
        let mut rng = seeded(seed);
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let p: f64 = rng.random_range(0.05..0.95);
            x.push(vec![logit(distort(p))]);
            y.push(if rng.random_bool(p) { 1.0 } else { 0.0 });
        }
        Dataset::new(x, y)
    }

    #[test]
    fn calibrated_scores_fit_identity() {
        let v = sample(20_000, 1, |p| p);
        let c = calibrate(&passthrough(), &v).unwrap().calibration.unwrap();
        assert!((c.a - 1.0).abs() < 0.1 && c.b.abs() < 0.1, "{c:?}");
    }

    #[test]
    fn cubed_scores_get_better_calibrated() {
        let v = sample(20_000, 2, |p| p.powi(3));
        let m = passthrough();
        let before = ece(&m.scores(&v.x).unwrap(), &v.y);
        let cal = calibrate(&m, &v).unwrap();
        let after = ece(&cal.scores(&v.x).unwrap(), &v.y);
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn constant_scores_are_degenerate() {
        let v = Dataset::new(vec![vec![0.3]; 10], (0..10).map(|i| (i % 2) as f64).collect());
        assert_eq!(calibrate(&passthrough(), &v).unwrap_err(), ModelError::DegenerateLabels);
    }

    #[test]
    fn single_class_validation_is_degenerate() {
        let v = Dataset::new((0..10).map(|i| vec![i as f64]).collect(), vec![1.0; 10]);
        assert_eq!(calibrate(&passthrough(), &v).unwrap_err(), ModelError::DegenerateLabels);
    }

    #[test]
    fn ece_never_increases() {
        for seed in 0..5 {
            let v = sample(300, seed, |p| (p * 1.3).min(0.99));
            let m = passthrough();
            let before = ece(&m.scores(&v.x).unwrap(), &v.y);
            let after = ece(&calibrate(&m, &v).unwrap().scores(&v.x).unwrap(), &v.y);
            assert!(after <= before + 1e-6);
        }
    }
}
