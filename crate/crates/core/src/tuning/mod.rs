//! Product-metric optimization beyond the training loss.
//!
//! Reward tuning searches linear scalarizations of several metrics and keeps
//! the non-dominated learned policies; decision-policy tuning prunes policy
//! configurations offline and refines the survivors with simulated A/B tests.
//! Both use [`propose_config`]: a fixed lattice for the first
//! [`LATTICE_SIZE`] trials, then ParEGO (random Chebyshev scalarization plus
//! a Gaussian-process surrogate with expected improvement).
//!
//! All metric vectors here are direction-adjusted: larger is better.

mod decision;
mod gp;
mod reward;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use decision::{tune_decision_policy, CandidateRecord, PolicyTuningInput, PolicyTuningReport, TuningOutcome};
pub use gp::{propose_config, CANDIDATES, LATTICE_SIZE, PAREGO_RHO};
pub use reward::{tune_reward, RewardCandidate, RewardFront};

use crate::offeval::OffEvalError;
use crate::policy::{ParamRange, PolicyError};
use crate::rl::RlError;
use crate::simlab::SimError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TuningError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("weight {0} is negative")]
    NegativeWeight(usize),
    #[error("weights must sum to 1")]
    NotOnSimplex,
    #[error("every point must weakly dominate the reference point")]
    BadReference,
    #[error("search space is empty")]
    EmptySpace,
    #[error("budget {have} is below the minimum {need}")]
    BudgetTooSmall { have: usize, need: usize },
    #[error("actions without coverage: {0:?}")]
    CoverageFailure(Vec<usize>),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    OffEval(#[from] OffEvalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Nonnegative weights over metrics summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RewardWeights(Vec<f64>);

impl RewardWeights {
    pub fn new(w: Vec<f64>) -> Result<Self, TuningError> {
        if let Some(i) = w.iter().position(|v| !(*v >= 0.0)) {
            return Err(TuningError::NegativeWeight(i));
        }
        if w.is_empty() || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TuningError::NotOnSimplex);
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for RewardWeights {
    type Error = TuningError;
    fn try_from(w: Vec<f64>) -> Result<Self, TuningError> {
        Self::new(w)
    }
}

impl From<RewardWeights> for Vec<f64> {
    fn from(w: RewardWeights) -> Self {
        w.0
    }
}

/// `w · m`.
pub fn scalarize(w: &[f64], m: &[f64]) -> Result<f64, TuningError> {
    if w.len() != m.len() {
        return Err(TuningError::DimensionMismatch { expected: w.len(), got: m.len() });
    }
    if let Some(i) = w.iter().position(|v| !(*v >= 0.0)) {
        return Err(TuningError::NegativeWeight(i));
    }
    Ok(w.iter().zip(m).map(|(w, m)| w * m).sum())
}

/// `a` is at least as good everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x >= y) && a.iter().zip(b).any(|(x, y)| x > y)
}

/// Indices of the points no other point dominates, ascending. Equal points
/// do not dominate each other, so duplicates are all kept.
pub fn nondominated_set(points: &[Vec<f64>]) -> Vec<usize> {
    // Visit in decreasing coordinate sum: a dominator always has a strictly
    // larger sum, so it is visited first, and checking against the front
    // found so far suffices by transitivity.
    let mut order: Vec<usize> = (0..points.len()).collect();
    let sum = |i: usize| points[i].iter().sum::<f64>();
    order.sort_by(|&a, &b| sum(b).total_cmp(&sum(a)).then(a.cmp(&b)));
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&j| dominates(&points[j], &points[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hypervolume {
    pub value: f64,
    /// Set for more than two metrics, where the value is the sum of the
    /// pairwise 2-D hypervolumes.
    pub approximate: bool,
}

/// Exact area dominated by `front` and bounded below by `reference`.
pub fn hypervolume_2d(front: &[[f64; 2]], reference: [f64; 2]) -> Result<f64, TuningError> {
    if front.iter().any(|p| p[0] < reference[0] || p[1] < reference[1]) {
        return Err(TuningError::BadReference);
    }
    let mut pts = front.to_vec();
    pts.sort_by(|a, b| b[0].total_cmp(&a[0]).then(b[1].total_cmp(&a[1])));
    let mut area = 0.0;
    let mut best_y = reference[1];
    for p in pts {
        if p[1] > best_y {
            area += (p[0] - reference[0]) * (p[1] - best_y);
            best_y = p[1];
        }
    }
    Ok(area)
}

/// Hypervolume in any dimension: exact for one or two metrics, the sum of
/// pairwise 2-D areas beyond that.
pub fn hypervolume(points: &[Vec<f64>], reference: &[f64]) -> Result<Hypervolume, TuningError> {
    let d = reference.len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(TuningError::DimensionMismatch { expected: d, got: p.len() });
    }
    match d {
        0 => Err(TuningError::EmptySpace),
        1 => {
            if points.iter().any(|p| p[0] < reference[0]) {
                return Err(TuningError::BadReference);
            }
            Ok(Hypervolume { value: points.iter().map(|p| p[0] - reference[0]).fold(0.0, f64::max), approximate: false })
        }
        _ => {
            let mut value = 0.0;
            for i in 0..d {
                for j in i + 1..d {
                    let proj: Vec<[f64; 2]> = points.iter().map(|p| [p[i], p[j]]).collect();
                    value += hypervolume_2d(&proj, [reference[i], reference[j]])?;
                }
            }
            Ok(Hypervolume { value, approximate: d > 2 })
        }
    }
}

/// Where configurations live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Space {
    /// Reward weights over `dim` metrics.
    Simplex { dim: usize },
    /// Independent bounded parameters.
    Box { params: Vec<ParamRange> },
}

impl Space {
    pub fn dim(&self) -> usize {
        match self {
            Space::Simplex { dim } => *dim,
            Space::Box { params } => params.len(),
        }
    }

    pub fn validate(&self) -> Result<(), TuningError> {
        match self {
            Space::Simplex { dim: 0 } => Err(TuningError::EmptySpace),
            Space::Box { params } if params.is_empty() || params.iter().any(|p| !(p.lo <= p.hi)) => Err(TuningError::EmptySpace),
            _ => Ok(()),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && match self {
                Space::Simplex { .. } => x.iter().all(|v| *v >= 0.0) && (x.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
                Space::Box { params } => params.iter().zip(x).all(|(p, v)| p.lo <= *v && *v <= p.hi),
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialSource {
    Lattice,
    Surrogate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningTrial {
    pub id: usize,
    pub config: Vec<f64>,
    pub observed: Vec<f64>,
    pub source: TrialSource,
    pub seed: u64,
}
