//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Condition number above which a ridge is added.
pub const RIDGE_CONDITION_LIMIT: f64 = 1e12;
/// Ridge size relative to the mean diagonal entry.
pub const RIDGE_RELATIVE_SIZE: f64 = 1e-8;

/// Spectral condition number of a symmetric matrix; infinite when the
/// smallest eigenvalue is not positive.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Ridge `ε = 1e-8·trace/q` to apply when `cond(m) > 1e12`, else `None`.
pub fn ridge_for(m: &DMatrix<f64>) -> Option<f64> {
    if condition_number(m) > RIDGE_CONDITION_LIMIT {
        Some(RIDGE_RELATIVE_SIZE * m.trace() / m.nrows() as f64)
    } else {
        None
    }
}

/// Symmetric positive-definite factorization with the ridge policy applied.
pub struct RidgedCholesky {
    chol: Cholesky<f64, Dyn>,
    pub ridge: Option<f64>,
}

impl RidgedCholesky {
    /// `None` when the matrix stays indefinite after the ridge.
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        let ridge = ridge_for(m);
        let mut work = m.clone();
        if let Some(eps) = ridge {
            if !(eps > 0.0) || !eps.is_finite() {
                return None;
            }
            for i in 0..work.nrows() {
                work[(i, i)] += eps;
            }
        }
        let chol = Cholesky::new(work)?;
        if chol.l_dirty().diagonal().iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return None;
        }
        Some(Self { chol, ridge })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        symmetrize(&inv)
    }
}

/// `(m + mᵀ) / 2`, exactly symmetric.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}
