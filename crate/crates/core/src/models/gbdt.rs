//! Histogram gradient-boosted regression trees with Newton leaf values.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{clamp_prob, sigmoid, Dataset, Hyperparams, ModelError, ModelParams};
use crate::rng::seeded;

const MAX_BINS: usize = 64;
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Objective {
    Logistic,
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum Node {
    Leaf { value: f64 },
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

/// Per-feature cut points and the bin index of every training value.
struct Binned {
    thresholds: Vec<Vec<f64>>,
    bins: Vec<Vec<u8>>,
}

impl Binned {
    fn new(data: &Dataset) -> Self {
        let d = data.dim();
        let mut thresholds = Vec::with_capacity(d);
        let mut bins = Vec::with_capacity(d);
        for f in 0..d {
            let mut col: Vec<f64> = data.x.iter().map(|r| r[f]).collect();
            col.sort_by(f64::total_cmp);
            let mut uniq = col.clone();
            uniq.dedup();
            let cuts: Vec<f64> = if uniq.len() <= MAX_BINS {
                uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
            } else {
                let mut c: Vec<f64> = (1..MAX_BINS).map(|k| col[k * col.len() / MAX_BINS]).collect();
                c.dedup();
                // The maximum must stay on the right of every cut.
                c.retain(|t| *t < uniq[uniq.len() - 1]);
                c
            };
            bins.push(data.x.iter().map(|r| cuts.partition_point(|t| *t < r[f]) as u8).collect());
            thresholds.push(cuts);
        }
        Self { thresholds, bins }
    }
}

struct Grower<'a> {
    binned: &'a Binned,
    grad: &'a [f64],
    hess: &'a [f64],
    hp: &'a Hyperparams,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -g / (h + self.hp.l2).max(1e-12)
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.hp.l2).max(1e-12)
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let idx = self.nodes.len();
        self.nodes.push(Node::Leaf { value: self.leaf_value(g, h) });
        if depth >= self.hp.max_depth || rows.len() < 2 * self.hp.min_leaf {
            return idx;
        }
        let parent = self.score(g, h);
        let mut best: Option<(f64, usize, usize)> = None;
        for (f, cuts) in self.binned.thresholds.iter().enumerate() {
            if cuts.is_empty() {
                continue;
            }
            let nb = cuts.len() + 1;
            let mut hg = vec![0.0; nb];
            let mut hh = vec![0.0; nb];
            let mut hc = vec![0usize; nb];
            let col = &self.binned.bins[f];
            for &i in &rows {
                let b = col[i] as usize;
                hg[b] += self.grad[i];
                hh[b] += self.hess[i];
                hc[b] += 1;
            }
            let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0usize);
            for k in 0..nb - 1 {
                gl += hg[k];
                hl += hh[k];
                cl += hc[k];
                let cr = rows.len() - cl;
                if cl < self.hp.min_leaf || cr < self.hp.min_leaf {
                    continue;
                }
                let gain = 0.5 * (self.score(gl, hl) + self.score(g - gl, h - hl) - parent);
                if gain > MIN_GAIN && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, k));
                }
            }
        }
        let Some((_, f, k)) = best else { return idx };
        let (left, right): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| self.binned.bins[f][i] as usize <= k);
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[idx] = Node::Split { feature: f, threshold: self.binned.thresholds[f][k], left: l, right: r };
        idx
    }
}

fn loss(obj: Objective, f: &[f64], y: &[f64]) -> f64 {
    let n = y.len() as f64;
    match obj {
        Objective::Logistic => {
            f.iter()
                .zip(y)
                .map(|(z, y)| {
                    let p = clamp_prob(sigmoid(*z));
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / n
        }
        Objective::Squared => f.iter().zip(y).map(|(z, y)| (z - y).powi(2)).sum::<f64>() / n,
    }
}

pub(crate) fn fit(data: &Dataset, hp: &Hyperparams, seed: u64, obj: Objective) -> Result<(ModelParams, Vec<f64>), ModelError> {
    let n = data.len();
    let mean = data.y.iter().sum::<f64>() / n as f64;
    let base = match obj {
        Objective::Logistic => super::logit(mean),
        Objective::Squared => mean,
    };
    let binned = Binned::new(data);
    let mut f = vec![base; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(hp.epochs);
    let mut losses = Vec::with_capacity(hp.epochs);
    let mut rng = seeded(seed);
    let mut last = loss(obj, &f, &data.y);
    for round in 0..hp.epochs {
        for i in 0..n {
            match obj {
                Objective::Logistic => {
                    let p = sigmoid(f[i]);
                    grad[i] = p - data.y[i];
                    hess[i] = (p * (1.0 - p)).max(1e-16);
                }
                Objective::Squared => {
                    grad[i] = f[i] - data.y[i];
                    hess[i] = 1.0;
                }
            }
        }
        let rows: Vec<usize> = if hp.subsample < 1.0 {
            let m = ((hp.subsample * n as f64).ceil() as usize).clamp(1, n);
            let mut r = sample(&mut rng, n, m).into_vec();
            r.sort_unstable();
            r
        } else {
            (0..n).collect()
        };
        let mut grower = Grower { binned: &binned, grad: &grad, hess: &hess, hp, nodes: Vec::new() };
        grower.grow(rows, 0);
        let tree = Tree { nodes: grower.nodes };
        for (fi, x) in f.iter_mut().zip(&data.x) {
            *fi += hp.learning_rate * tree.predict(x);
        }
        let l = loss(obj, &f, &data.y);
        if !l.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch: round, last_loss: last });
        }
        losses.push(l);
        last = l;
        trees.push(tree);
    }
    Ok((ModelParams::Trees { base, learning_rate: hp.learning_rate, trees }, losses))
}
