//! Thin wrappers over nalgebra for the handful of dense solves the platform
//! needs (ridge regression, GP posteriors, exact policy evaluation).

use nalgebra::{DMatrix, DVector};

/// Solves `A x = b` for square `A` via LU. `None` if singular.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().lu().solve(b)
}

/// Gram matrix `XᵀX + λI` and `Xᵀ` for row-major design rows.
pub fn normal_equations(rows: &[Vec<f64>], ridge: f64) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let mut g = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        for i in 0..d {
            if r[i] == 0.0 {
                continue;
            }
            for j in i..d {
                g[(i, j)] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            g[(i, j)] = g[(j, i)];
        }
        g[(i, i)] += ridge;
    }
    g
}

/// `Xᵀy` for row-major design rows.
pub fn xt_y(rows: &[Vec<f64>], y: &[f64]) -> DVector<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let mut v = DVector::<f64>::zeros(d);
    for (r, &t) in rows.iter().zip(y) {
        for (i, &x) in r.iter().enumerate() {
            v[i] += x * t;
        }
    }
    v
}

/// Cached Cholesky factor of a ridge Gram matrix, for repeated solves with
/// changing targets.
pub struct RidgeSolver {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl RidgeSolver {
    pub fn new(rows: &[Vec<f64>], ridge: f64) -> Option<Self> {
        normal_equations(rows, ridge).cholesky().map(|chol| Self { chol })
    }

    pub fn solve(&self, rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        self.chol.solve(&xt_y(rows, y)).iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_recovers_exact_fit() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![1.0, i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| 3.0 + 2.0 * i as f64).collect();
        let w = RidgeSolver::new(&rows, 1e-10).unwrap().solve(&rows, &y);
        assert!((w[0] - 3.0).abs() < 1e-6 && (w[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn lu_solve() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let x = solve(&a, &DVector::from_vec(vec![3.0, 5.0])).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
    }
}
