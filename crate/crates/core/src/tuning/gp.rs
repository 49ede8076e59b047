use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{Space, TuningError, TuningTrial};
use crate::rng::{derive_seed, seeded, Rng};

/// Trials proposed from the fixed lattice before the surrogate takes over.
pub const LATTICE_SIZE: usize = 8;
/// Acquisition candidates per surrogate step.
pub const CANDIDATES: usize = 512;
/// Weight of the linear term in the augmented Chebyshev scalarization.
pub const PAREGO_RHO: f64 = 0.05;
const NOISE: f64 = 1e-4;

fn lattice_point(space: &Space, i: usize) -> Vec<f64> {
    let step = i as f64 / (LATTICE_SIZE - 1) as f64;
    match space {
        Space::Simplex { dim: 1 } => vec![1.0],
        Space::Simplex { dim: 2 } => vec![step, 1.0 - step],
        Space::Simplex { dim } => {
            // Vertices, the centroid, then edge midpoints.
            let d = *dim;
            let mut pts: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|k| f64::from(u8::from(j == k))).collect()).collect();
            pts.push(vec![1.0 / d as f64; d]);
            for a in 0..d {
                for b in a + 1..d {
                    pts.push((0..d).map(|k| if k == a || k == b { 0.5 } else { 0.0 }).collect());
                }
            }
            pts.swap_remove(i % pts.len())
        }
        Space::Box { params } if params.len() == 1 => vec![params[0].lo + step * (params[0].hi - params[0].lo)],
        Space::Box { params } => params
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let g = 2 * j + 1;
                p.lo + ((i * g) % LATTICE_SIZE) as f64 / (LATTICE_SIZE - 1) as f64 * (p.hi - p.lo)
            })
            .collect(),
    }
}

fn dirichlet(rng: &mut Rng, d: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..d).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sample(space: &Space, rng: &mut Rng) -> Vec<f64> {
    match space {
        Space::Simplex { dim } => dirichlet(rng, *dim),
        Space::Box { params } => params.iter().map(|p| p.lo + rng.random::<f64>() * (p.hi - p.lo)).collect(),
    }
}

/// Coordinates in the unit cube, used by the kernel.
fn unit(space: &Space, x: &[f64]) -> Vec<f64> {
    match space {
        Space::Simplex { .. } => x.to_vec(),
        Space::Box { params } => params.iter().zip(x).map(|(p, v)| if p.hi > p.lo { (v - p.lo) / (p.hi - p.lo) } else { 0.0 }).collect(),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Augmented Chebyshev scalarization of min-max normalized observations,
/// negated so that larger is better.
fn chebyshev(history: &[TuningTrial], lambda: &[f64]) -> Vec<f64> {
    let m = lambda.len();
    let lo: Vec<f64> = (0..m).map(|j| history.iter().map(|t| t.observed[j]).fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..m).map(|j| history.iter().map(|t| t.observed[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    history
        .iter()
        .map(|t| {
            let gaps: Vec<f64> = (0..m)
                .map(|j| {
                    let y = if hi[j] > lo[j] { (t.observed[j] - lo[j]) / (hi[j] - lo[j]) } else { 0.0 };
                    lambda[j] * (1.0 - y)
                })
                .collect();
            -(gaps.iter().copied().fold(0.0, f64::max) + PAREGO_RHO * gaps.iter().sum::<f64>())
        })
        .collect()
}

struct Gp {
    xs: Vec<Vec<f64>>,
    alpha: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ell2: f64,
}

impl Gp {
    /// Squared-exponential GP with unit signal variance on standardized
    /// targets; length scale is the median pairwise distance.
    fn fit(xs: Vec<Vec<f64>>, y: &[f64]) -> Self {
        let n = xs.len();
        let mut d: Vec<f64> = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let v = sq_dist(&xs[i], &xs[j]).sqrt();
                if v > 0.0 {
                    d.push(v);
                }
            }
        }
        let ell = if d.is_empty() { 1.0 } else { crate::prep::quantile_sorted(&crate::prep::sorted_copy(&d), 0.5) };
        let ell2 = ell * ell;
        let k = DMatrix::from_fn(n, n, |i, j| (-sq_dist(&xs[i], &xs[j]) / (2.0 * ell2)).exp() + if i == j { NOISE } else { 0.0 });
        let chol = k.cholesky().expect("kernel matrix with noise is positive definite");
        let alpha = chol.solve(&DVector::from_column_slice(y));
        Self { xs, alpha, chol, ell2 }
    }

    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| (-sq_dist(xi, x) / (2.0 * self.ell2)).exp()));
        let mean = ks.dot(&self.alpha);
        let v = self.chol.solve(&ks);
        let var = (1.0 - ks.dot(&v)).max(1e-12);
        (mean, var.sqrt())
    }
}

/// Next configuration to try. Lattice points come first; after that a
/// ParEGO step with weights and candidates drawn from a stream derived from
/// `seed` and the history length.
pub fn propose_config(history: &[TuningTrial], space: &Space, seed: u64) -> Result<Vec<f64>, TuningError> {
    space.validate()?;
    if history.len() < LATTICE_SIZE {
        return Ok(lattice_point(space, history.len()));
    }
    let m = history[0].observed.len();
    if let Some(t) = history.iter().find(|t| t.observed.len() != m || t.config.len() != space.dim()) {
        return Err(TuningError::DimensionMismatch { expected: m, got: t.observed.len() });
    }
    let mut rng = seeded(derive_seed(seed, history.len() as u64));
    let lambda = dirichlet(&mut rng, m);
    let g = chebyshev(history, &lambda);
    let mu = g.iter().sum::<f64>() / g.len() as f64;
    let sd = (g.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / g.len() as f64).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let y: Vec<f64> = g.iter().map(|v| (v - mu) / sd).collect();
    let best = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gp = Gp::fit(history.iter().map(|t| unit(space, &t.config)).collect(), &y);
    let normal = Normal::standard();
    let mut winner: Option<(f64, Vec<f64>)> = None;
    for _ in 0..CANDIDATES {
        let c = sample(space, &mut rng);
        let (mean, s) = gp.predict(&unit(space, &c));
        let z = (mean - best) / s;
        let ei = (mean - best) * normal.cdf(z) + s * normal.pdf(z);
        if winner.as_ref().is_none_or(|(w, _)| ei > *w) {
            winner = Some((ei, c));
        }
    }
    Ok(winner.expect("at least one candidate").1)
}

#[cfg(test)]
mod tests {
    use super::super::TrialSource;
    use super::*;
    use crate::policy::ParamRange;

    fn trial(id: usize, config: Vec<f64>, observed: Vec<f64>) -> TuningTrial {
        TuningTrial { id, config, observed, source: TrialSource::Lattice, seed: 0 }
    }

    #[test]
    fn lattice_comes_first_and_is_deterministic() {
        let s = Space::Simplex { dim: 2 };
        assert_eq!(propose_config(&[], &s, 1).unwrap(), vec![0.0, 1.0]);
        assert_eq!(propose_config(&[], &s, 2).unwrap(), vec![0.0, 1.0]);
        let b = Space::Box { params: vec![ParamRange { name: "theta".into(), lo: 0.0, hi: 1.0 }] };
        let mut h = Vec::new();
        for i in 0..LATTICE_SIZE {
            let c = propose_config(&h, &b, 9).unwrap();
            assert!((c[0] - i as f64 / 7.0).abs() < 1e-15);
            h.push(trial(i, c, vec![0.0]));
        }
    }

    #[test]
    fn lattice_points_lie_in_space() {
        for s in [
            Space::Simplex { dim: 1 },
            Space::Simplex { dim: 3 },
            Space::Simplex { dim: 5 },
            Space::Box { params: vec![ParamRange { name: "a".into(), lo: -1.0, hi: 2.0 }, ParamRange { name: "b".into(), lo: 0.0, hi: 0.5 }] },
        ] {
            for i in 0..LATTICE_SIZE {
                assert!(s.contains(&lattice_point(&s, i)), "{s:?} {i}");
            }
        }
    }

    #[test]
    fn empty_space_is_rejected() {
        assert_eq!(propose_config(&[], &Space::Box { params: vec![] }, 0), Err(TuningError::EmptySpace));
    }

    fn history_on(space: &Space, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<TuningTrial> {
        let mut h = Vec::new();
        for i in 0..LATTICE_SIZE {
            let c = propose_config(&h, space, 3).unwrap();
            let o = f(&c);
            h.push(trial(i, c, o));
        }
        h
    }

    #[test]
    fn surrogate_proposals_are_inside_and_reproducible() {
        let b = Space::Box { params: vec![ParamRange { name: "a".into(), lo: 2.0, hi: 3.0 }, ParamRange { name: "b".into(), lo: -1.0, hi: 1.0 }] };
        let h = history_on(&b, |c| vec![-(c[0] - 2.5).powi(2), c[1]]);
        let p = propose_config(&h, &b, 5).unwrap();
        assert!(b.contains(&p));
        assert_eq!(p, propose_config(&h, &b, 5).unwrap());
        let s = Space::Simplex { dim: 3 };
        let h = history_on(&s, |c| vec![c[0], c[1] * c[2]]);
        assert!(s.contains(&propose_config(&h, &s, 5).unwrap()));
    }

    /// On a smooth 1-D objective the surrogate steps should approach the
    /// interior optimum between lattice points.
    #[test]
    fn surrogate_refines_toward_optimum() {
        let b = Space::Box { params: vec![ParamRange { name: "x".into(), lo: 0.0, hi: 1.0 }] };
        let f = |c: &[f64]| vec![-(c[0] - 0.37).powi(2)];
        let mut h = history_on(&b, f);
        for i in LATTICE_SIZE..LATTICE_SIZE + 6 {
            let c = propose_config(&h, &b, 8).unwrap();
            let o = f(&c);
            h.push(TuningTrial { id: i, config: c, observed: o, source: TrialSource::Surrogate, seed: 8 });
        }
        let best = h.iter().map(|t| (t.config[0] - 0.37).abs()).fold(f64::INFINITY, f64::min);
        assert!(best < 0.03, "{best}");
    }

    #[test]
    fn gp_interpolates_training_points() {
        let xs = vec![vec![0.0], vec![0.5], vec![1.0]];
        let gp = Gp::fit(xs, &[1.0, -1.0, 0.5]);
        let (m, s) = gp.predict(&[0.5]);
        assert!((m + 1.0).abs() < 1e-3 && s < 0.02);
    }
}
