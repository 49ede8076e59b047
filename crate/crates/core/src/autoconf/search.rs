use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AutoconfError;
use crate::models::{self, Dataset, Hyperparams, ModelArtifact, ModelKind};
use crate::prep::unit_folds;
use crate::rng::{derive_seed, permutation, seeded};
use crate::usecase::TaskKind;

pub const CV_FOLDS: usize = 5;
pub const MIN_UNITS_PER_FOLD: usize = 5;
/// Training fraction of the first successive-halving rung.
const START_FRACTION: f64 = 0.25;
const TIE: f64 = 1e-9;
const HALTON_BASES: [u32; 6] = [2, 3, 5, 7, 11, 13];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Uniform,
    LogUniform,
    Integer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    /// A [`Hyperparams`] field name.
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub scale: Scale,
    pub default: f64,
}

impl ParamSpec {
    fn new(name: &str, lo: f64, hi: f64, scale: Scale, default: f64) -> Self {
        Self { name: name.to_string(), lo, hi, scale, default }
    }

    /// Maps `u` in [0, 1) onto the range.
    fn at(&self, u: f64) -> f64 {
        match self.scale {
            Scale::Uniform => self.lo + u * (self.hi - self.lo),
            Scale::LogUniform => (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp(),
            Scale::Integer => (self.lo + u * (self.hi - self.lo + 1.0)).floor().min(self.hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<ParamSpec>,
}

fn set(hp: &mut Hyperparams, name: &str, v: f64) -> bool {
    match name {
        "learning_rate" => hp.learning_rate = v,
        "l2" => hp.l2 = v,
        "epochs" => hp.epochs = v as usize,
        "max_depth" => hp.max_depth = v as usize,
        "min_leaf" => hp.min_leaf = v as usize,
        "subsample" => hp.subsample = v,
        _ => return false,
    }
    true
}

impl SearchSpace {
    pub fn default_for(kind: ModelKind) -> Self {
        let d = Hyperparams::default_for(kind);
        let params = if kind.is_tree() {
            vec![
                ParamSpec::new("learning_rate", 0.01, 0.5, Scale::LogUniform, d.learning_rate),
                ParamSpec::new("l2", 1e-3, 10.0, Scale::LogUniform, d.l2),
                ParamSpec::new("epochs", 20.0, 300.0, Scale::Integer, d.epochs as f64),
                ParamSpec::new("max_depth", 1.0, 6.0, Scale::Integer, d.max_depth as f64),
                ParamSpec::new("min_leaf", 5.0, 100.0, Scale::Integer, d.min_leaf as f64),
                ParamSpec::new("subsample", 0.5, 1.0, Scale::Uniform, d.subsample),
            ]
        } else {
            vec![
                ParamSpec::new("learning_rate", 1e-3, 1.0, Scale::LogUniform, d.learning_rate),
                ParamSpec::new("l2", 1e-6, 0.1, Scale::LogUniform, d.l2),
                ParamSpec::new("epochs", 50.0, 1000.0, Scale::Integer, d.epochs as f64),
            ]
        };
        Self { params }
    }

    pub fn validate(&self) -> Result<(), AutoconfError> {
        let bad = |m: String| Err(AutoconfError::BadSpace(m));
        if self.params.len() > HALTON_BASES.len() {
            return bad(format!("at most {} parameters", HALTON_BASES.len()));
        }
        for p in &self.params {
            if !set(&mut Hyperparams::default_for(ModelKind::Linear), &p.name, p.default) {
                return bad(format!("unknown hyperparameter `{}`", p.name));
            }
            if !(p.lo <= p.default && p.default <= p.hi) {
                return bad(format!("default of `{}` outside its range", p.name));
            }
            if p.scale == Scale::LogUniform && !(p.lo > 0.0) {
                return bad(format!("log range of `{}` must be positive", p.name));
            }
        }
        Ok(())
    }

    /// `base` with every parameter at its declared default.
    pub fn defaults(&self, base: &Hyperparams) -> Hyperparams {
        let mut hp = base.clone();
        for p in &self.params {
            set(&mut hp, &p.name, p.default);
        }
        hp
    }

    fn at(&self, base: &Hyperparams, u: &[f64]) -> Hyperparams {
        let mut hp = base.clone();
        for (p, u) in self.params.iter().zip(u) {
            set(&mut hp, &p.name, p.at(*u));
        }
        hp
    }
}

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = u64::from(base);
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= b as f64;
        r += f * (i % b) as f64;
        i /= b;
    }
    r
}

/// Randomly shifted Halton points, one per call index starting at 1.
struct QuasiRandom {
    shift: Vec<f64>,
}

impl QuasiRandom {
    fn new(dim: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        Self { shift: (0..dim).map(|_| rng.random::<f64>()).collect() }
    }

    fn point(&self, i: u64) -> Vec<f64> {
        self.shift.iter().zip(HALTON_BASES).map(|(s, b)| (radical_inverse(i, b) + s).fract()).collect()
    }
}

/// Labeled rows with a unit-disjoint fold assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvData {
    pub data: Dataset,
    /// Fold index per row.
    pub folds: Vec<usize>,
}

impl CvData {
    /// Assigns rows to [`CV_FOLDS`] folds so that no unit spans two folds.
    pub fn new(data: Dataset, units: &[String], seed: u64) -> Result<Self, AutoconfError> {
        assert_eq!(data.len(), units.len(), "one unit per row");
        let distinct = units.iter().collect::<std::collections::BTreeSet<_>>().len();
        let need = CV_FOLDS * MIN_UNITS_PER_FOLD;
        if distinct < need {
            return Err(AutoconfError::InsufficientData { have: distinct, need });
        }
        let map = unit_folds(units.iter().map(String::as_str), CV_FOLDS, seed)?;
        let folds = units.iter().map(|u| map[u]).collect();
        Ok(Self { data, folds })
    }

    /// Training rows outside fold `k`, thinned to `fraction`, and the rows
    /// of fold `k`.
    fn fold(&self, k: usize, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let order = permutation(self.data.len(), &mut seeded(seed));
        let mut rank = vec![0; order.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let cut = (fraction * self.data.len() as f64).ceil() as usize;
        let train: Vec<usize> = (0..self.data.len()).filter(|&i| self.folds[i] != k && rank[i] < cut).collect();
        let valid: Vec<usize> = (0..self.data.len()).filter(|&i| self.folds[i] == k).collect();
        (self.data.subset(&train), self.data.subset(&valid))
    }
}

/// Mean validation metric over the folds and the per-fold values. Models
/// are trained on `fraction` of the non-held-out rows.
pub fn cv_score(kind: ModelKind, hp: &Hyperparams, cv: &CvData, fraction: f64, seed: u64) -> Result<(f64, Vec<f64>), AutoconfError> {
    let per_fold = (0..CV_FOLDS)
        .map(|k| {
            let (train, valid) = cv.fold(k, fraction, derive_seed(seed, 1000));
            let m = models::train(kind, &train, hp, derive_seed(seed, k as u64), None)?;
            Ok(m.validation_metric(&valid)?.value)
        })
        .collect::<Result<Vec<f64>, AutoconfError>>()?;
    Ok((per_fold.iter().sum::<f64>() / CV_FOLDS as f64, per_fold))
}

fn lower_is_better(kind: ModelKind) -> bool {
    matches!(kind, ModelKind::Linear | ModelKind::GbdtRegressor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub trial: usize,
    pub kind: ModelKind,
    pub hyperparams: Hyperparams,
    pub complexity: usize,
    /// Last rung the trial was evaluated on, from 0.
    pub rung: usize,
    pub fraction: f64,
    pub seed: u64,
    /// "auc", "rmse" or "accuracy".
    pub metric: String,
    /// Mean over folds at the last rung; `None` when training failed.
    pub score: Option<f64>,
    pub fold_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl LeaderboardEntry {
    /// Larger is better.
    fn oriented(&self) -> f64 {
        match self.score {
            Some(s) if lower_is_better(self.kind) => -s,
            Some(s) => s,
            None => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub entries: Vec<LeaderboardEntry>,
    pub winner: usize,
    pub folds: Vec<usize>,
}

impl Leaderboard {
    pub fn winner(&self) -> &LeaderboardEntry {
        &self.entries[self.winner]
    }
}

fn better(a: &LeaderboardEntry, b: &LeaderboardEntry) -> bool {
    let (x, y) = (a.oriented(), b.oriented());
    if (x - y).abs() > TIE || (x.is_infinite() != y.is_infinite()) {
        return x > y;
    }
    (a.complexity, a.trial) < (b.complexity, b.trial)
}

/// Successive halving: every candidate runs on [`START_FRACTION`] of the
/// training rows, the better half (plus every protected trial) moves on with
/// twice the data, until a rung on all the data.
fn search(cands: Vec<(ModelKind, Hyperparams)>, protected: &[usize], cv: &CvData, seed: u64) -> Result<Leaderboard, AutoconfError> {
    let dim = cv.data.dim();
    let mut entries: Vec<LeaderboardEntry> = cands
        .into_iter()
        .enumerate()
        .map(|(trial, (kind, hyperparams))| LeaderboardEntry {
            trial,
            kind,
            complexity: hyperparams.complexity(kind, dim),
            hyperparams,
            rung: 0,
            fraction: 0.0,
            seed: derive_seed(seed, trial as u64),
            metric: String::new(),
            score: None,
            fold_scores: Vec::new(),
            error: None,
        })
        .collect();
    let mut alive: Vec<usize> = (0..entries.len()).collect();
    let mut fraction = if entries.len() == 1 { 1.0 } else { START_FRACTION };
    let mut rung = 0;
    loop {
        let results: BTreeMap<usize, Result<(f64, Vec<f64>), AutoconfError>> = alive
            .par_iter()
            .map(|&i| {
                let e = &entries[i];
                (i, cv_score(e.kind, &e.hyperparams, cv, fraction, e.seed))
            })
            .collect();
        for (i, r) in results {
            let e = &mut entries[i];
            e.rung = rung;
            e.fraction = fraction;
            e.metric = if e.kind.is_classifier() { "auc" } else if lower_is_better(e.kind) { "rmse" } else { "accuracy" }.to_string();
            match r {
                Ok((s, f)) => (e.score, e.fold_scores, e.error) = (Some(s), f, None),
                Err(err) => (e.score, e.fold_scores, e.error) = (None, Vec::new(), Some(err.to_string())),
            }
        }
        if fraction >= 1.0 {
            break;
        }
        let mut ranked = alive.clone();
        ranked.sort_by(|&a, &b| if better(&entries[a], &entries[b]) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
        let keep = alive.len().div_ceil(2);
        let mut next: Vec<usize> = ranked[..keep].to_vec();
        for p in protected {
            if alive.contains(p) && !next.contains(p) {
                next.push(*p);
            }
        }
        next.sort_unstable();
        alive = next;
        fraction = (fraction * 2.0).min(1.0);
        rung += 1;
    }
    let winner = alive.iter().copied().reduce(|a, b| if better(&entries[b], &entries[a]) { b } else { a }).expect("at least one trial");
    if entries[winner].score.is_none() {
        return Err(AutoconfError::BadSpace(format!("every trial failed: {}", entries[winner].error.clone().unwrap_or_default())));
    }
    Ok(Leaderboard { entries, winner, folds: cv.folds.clone() })
}

/// Quasi-random search over `space` with successive halving. Trial 0 is the
/// default configuration and always reaches the full-data rung, so the
/// result is never worse than the defaults on the validation metric.
pub fn tune_hyperparams(kind: ModelKind, cv: &CvData, space: &SearchSpace, budget: usize, seed: u64) -> Result<(Hyperparams, Leaderboard), AutoconfError> {
    if budget == 0 {
        return Err(AutoconfError::ZeroBudget);
    }
    space.validate()?;
    let base = Hyperparams::default_for(kind);
    let qr = QuasiRandom::new(space.params.len(), seed);
    let cands = (0..budget).map(|i| (kind, if i == 0 { space.defaults(&base) } else { space.at(&base, &qr.point(i as u64)) })).collect();
    let lb = search(cands, &[0], cv, seed)?;
    Ok((lb.winner().hyperparams.clone(), lb))
}

/// Picks a model family and hyperparameters for `task` by cross-validated
/// successive halving over the linear and GBDT families, then refits the
/// winner on all rows. Family defaults are trials 0 and 1; later trials
/// alternate families. Ties within 1e-9 go to the lower complexity.
pub fn select_model(task: TaskKind, cv: &CvData, budget: usize, seed: u64) -> Result<(ModelArtifact, Leaderboard), AutoconfError> {
    if budget == 0 {
        return Err(AutoconfError::ZeroBudget);
    }
    let kinds = match task {
        TaskKind::BinaryClassification => [ModelKind::Logistic, ModelKind::GbdtClassifier],
        TaskKind::Regression => [ModelKind::Linear, ModelKind::GbdtRegressor],
        t => return Err(AutoconfError::UnsupportedTask(t)),
    };
    let spaces = kinds.map(SearchSpace::default_for);
    let qrs = [QuasiRandom::new(spaces[0].params.len(), derive_seed(seed, 0)), QuasiRandom::new(spaces[1].params.len(), derive_seed(seed, 1))];
    let cands = (0..budget)
        .map(|i| {
            let f = i % 2;
            let base = Hyperparams::default_for(kinds[f]);
            let hp = if i < 2 { spaces[f].defaults(&base) } else { spaces[f].at(&base, &qrs[f].point((i / 2) as u64)) };
            (kinds[f], hp)
        })
        .collect();
    let protected: Vec<usize> = (0..budget.min(2)).collect();
    let lb = search(cands, &protected, cv, seed)?;
    let w = lb.winner();
    let artifact = models::train(w.kind, &cv.data, &w.hyperparams, w.seed, None)?;
    Ok((artifact, lb))
}
