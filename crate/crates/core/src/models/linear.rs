//! Full-batch gradient descent for the linear-family models.

use super::{dot, softmax, Dataset, Hyperparams, ModelError, ModelParams};

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean log loss plus `l2/2 * |w|^2`, and its gradient in `(w, b)`.
pub(crate) fn logistic_loss_grad(w: &[f64], b: f64, data: &Dataset, l2: f64) -> (f64, Vec<f64>, f64) {
    let n = data.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (x, &y) in data.x.iter().zip(&data.y) {
        let z = dot(w, x) + b;
        loss += softplus(z) - y * z;
        let r = super::sigmoid(z) - y;
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += r * xi;
        }
        gb += r;
    }
    for (g, wi) in gw.iter_mut().zip(w) {
        *g = *g / n + l2 * wi;
    }
    let reg = 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    (loss / n + reg, gw, gb / n)
}

fn squared_loss_grad(w: &[f64], b: f64, data: &Dataset, l2: f64) -> (f64, Vec<f64>, f64) {
    let n = data.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (x, &y) in data.x.iter().zip(&data.y) {
        let r = dot(w, x) + b - y;
        loss += 0.5 * r * r;
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += r * xi;
        }
        gb += r;
    }
    for (g, wi) in gw.iter_mut().zip(w) {
        *g = *g / n + l2 * wi;
    }
    let reg = 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    (loss / n + reg, gw, gb / n)
}

type LossGrad = fn(&[f64], f64, &Dataset, f64) -> (f64, Vec<f64>, f64);

fn descend(data: &Dataset, hp: &Hyperparams, f: LossGrad) -> Result<(ModelParams, Vec<f64>), ModelError> {
    let mut w = vec![0.0; data.dim()];
    let mut b = 0.0;
    let mut losses = Vec::with_capacity(hp.epochs);
    let mut last = f(&w, b, data, hp.l2).0;
    for epoch in 0..hp.epochs {
        let (_, gw, gb) = f(&w, b, data, hp.l2);
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= hp.learning_rate * g;
        }
        b -= hp.learning_rate * gb;
        let loss = f(&w, b, data, hp.l2).0;
        if !loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteLoss { epoch, last_loss: last });
        }
        losses.push(loss);
        last = loss;
    }
    Ok((ModelParams::Linear { weights: w, bias: b }, losses))
}

pub(crate) fn fit_logistic(data: &Dataset, hp: &Hyperparams) -> Result<(ModelParams, Vec<f64>), ModelError> {
    descend(data, hp, logistic_loss_grad)
}

pub(crate) fn fit_linear(data: &Dataset, hp: &Hyperparams) -> Result<(ModelParams, Vec<f64>), ModelError> {
    descend(data, hp, squared_loss_grad)
}

pub(crate) fn fit_softmax(data: &Dataset, hp: &Hyperparams) -> Result<(ModelParams, Vec<f64>), ModelError> {
    let k = data.y.iter().fold(0.0f64, |m, &y| m.max(y)) as usize + 1;
    let d = data.dim();
    let n = data.len() as f64;
    let mut w = vec![vec![0.0; d]; k];
    let mut b = vec![0.0; k];
    let mut losses = Vec::with_capacity(hp.epochs);
    let mut last = (k as f64).ln();
    for epoch in 0..hp.epochs {
        let mut gw = vec![vec![0.0; d]; k];
        let mut gb = vec![0.0; k];
        for (x, &y) in data.x.iter().zip(&data.y) {
            let logits: Vec<f64> = w.iter().zip(&b).map(|(wc, bc)| dot(wc, x) + bc).collect();
            let p = softmax(&logits);
            for c in 0..k {
                let r = p[c] - if c == y as usize { 1.0 } else { 0.0 };
                for (g, xi) in gw[c].iter_mut().zip(x) {
                    *g += r * xi;
                }
                gb[c] += r;
            }
        }
        for c in 0..k {
            for j in 0..d {
                w[c][j] -= hp.learning_rate * (gw[c][j] / n + hp.l2 * w[c][j]);
            }
            b[c] -= hp.learning_rate * gb[c] / n;
        }
        let mut loss = 0.0;
        for (x, &y) in data.x.iter().zip(&data.y) {
            let logits: Vec<f64> = w.iter().zip(&b).map(|(wc, bc)| dot(wc, x) + bc).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            loss += lse - logits[y as usize];
        }
        loss = loss / n + 0.5 * hp.l2 * w.iter().flatten().map(|v| v * v).sum::<f64>();
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch, last_loss: last });
        }
        losses.push(loss);
        last = loss;
    }
    Ok((ModelParams::Softmax { weights: w, biases: b }, losses))
}
