//! Functional principal components of a smoothed covariance surface.
//!
//! The covariance operator is discretized on the surface's grid with a
//! quadrature rule `w_j`, turning `∫ R(s,t) φ(t) dt = λ φ(s)` into the
//! symmetric eigenproblem `W^{1/2} R W^{1/2} v = λ v` with `φ = W^{-1/2} v`.
//! Eigenfunctions come out orthonormal under the same rule:
//! `Σ_j w_j φ_r(t_j) φ_l(t_j) = 1(r = l)`.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::funcdata::TimeGrid;
use crate::kernelsmooth::SmoothedCovariance;

/// Default cap on the number of stored eigenfunctions.
pub const DEFAULT_MAX_COMPONENTS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FpcaError {
    #[error("covariance surface contains non-finite values")]
    NonFinite,
    #[error("covariance surface is not square over its grid")]
    Shape,
    #[error("covariance surface has no positive eigenvalue")]
    NoPositiveEigenvalues,
    #[error("invalid truncation policy: {0}")]
    InvalidPolicy(String),
    #[error("eigenfunction index {index} out of range ({retained} retained)")]
    IndexOutOfRange { index: usize, retained: usize },
    #[error("evaluation time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
}

/// Quadrature rule used to discretize the integral operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quadrature {
    /// Uniform weight `Δ` at every grid point.
    Rectangle,
    /// Trapezoid weights: `Δ/2` at the two endpoints, `Δ` inside.
    #[default]
    Trapezoid,
}

impl Quadrature {
    pub fn weights(&self, grid: &TimeGrid) -> Vec<f64> {
        let pts = grid.points();
        let g = pts.len();
        match self {
            Quadrature::Rectangle => vec![grid.spacing(); g],
            Quadrature::Trapezoid => (0..g)
                .map(|j| {
                    let left = if j > 0 { pts[j] - pts[j - 1] } else { 0.0 };
                    let right = if j + 1 < g { pts[j + 1] - pts[j] } else { 0.0 };
                    0.5 * (left + right)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    pub quadrature: Quadrature,
    /// Maximum number of eigenfunctions kept; `None` means `min(G, 20)`.
    pub max_components: Option<usize>,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            quadrature: Quadrature::Trapezoid,
            max_components: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    grid: TimeGrid,
    weights: Vec<f64>,
    eigenvalues: Vec<f64>,
    raw_eigenvalues: Vec<f64>,
    eigenfunctions: DMatrix<f64>,
    fve: Vec<f64>,
}

impl EigenSystem {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Quadrature weights the eigenfunctions are orthonormal under.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// All `G` eigenvalues, descending, negatives clipped to zero.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Eigenvalues before clipping.
    pub fn raw_eigenvalues(&self) -> &[f64] {
        &self.raw_eigenvalues
    }

    /// `retained × G` grid values of the leading eigenfunctions.
    pub fn eigenfunctions(&self) -> &DMatrix<f64> {
        &self.eigenfunctions
    }

    /// Cumulative fraction of variance explained; `fve()[k]` covers components `0..=k`.
    pub fn fve(&self) -> &[f64] {
        &self.fve
    }

    pub fn retained(&self) -> usize {
        self.eigenfunctions.nrows()
    }

    pub fn positive_count(&self) -> usize {
        self.eigenvalues.iter().filter(|&&l| l > 0.0).count()
    }

    /// Cumulative FVE of the first `kappa` components.
    pub fn fve_at(&self, kappa: usize) -> f64 {
        if kappa == 0 {
            0.0
        } else {
            self.fve[(kappa - 1).min(self.fve.len() - 1)]
        }
    }

    /// Discrete inner product `Σ_j w_j f(t_j) g(t_j)` under the system's quadrature.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(f.iter().zip(g))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    /// Grid values of eigenfunction `r` (0-based).
    pub fn eigenfunction(&self, r: usize) -> Vec<f64> {
        self.eigenfunctions.row(r).iter().copied().collect()
    }
}

pub fn eigen_decompose(cov: &SmoothedCovariance) -> Result<EigenSystem, FpcaError> {
    eigen_decompose_with(cov, EigenOptions::default())
}

pub fn eigen_decompose_with(cov: &SmoothedCovariance, options: EigenOptions) -> Result<EigenSystem, FpcaError> {
    decompose_matrix(&cov.grid, &cov.values, options)
}

/// Decomposes a symmetric surface sampled on `grid`.
pub fn decompose_matrix(
    grid: &TimeGrid,
    values: &DMatrix<f64>,
    options: EigenOptions,
) -> Result<EigenSystem, FpcaError> {
    let g = grid.len();
    if values.nrows() != g || values.ncols() != g {
        return Err(FpcaError::Shape);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FpcaError::NonFinite);
    }
    let weights = options.quadrature.weights(grid);
    let root: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let scaled = DMatrix::from_fn(g, g, |a, b| root[a] * 0.5 * (values[(a, b)] + values[(b, a)]) * root[b]);
    let eig = SymmetricEigen::new(scaled);

    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let raw_eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let eigenvalues: Vec<f64> = raw_eigenvalues.iter().map(|&l| l.max(0.0)).collect();

    let positive = eigenvalues.iter().filter(|&&l| l > 0.0).count();
    if positive == 0 {
        return Err(FpcaError::NoPositiveEigenvalues);
    }
    let k_max = options.max_components.unwrap_or(DEFAULT_MAX_COMPONENTS).min(g);
    let retained = k_max.min(positive);

    let mut eigenfunctions = DMatrix::zeros(retained, g);
    for r in 0..retained {
        let v = eig.eigenvectors.column(order[r]);
        let mut phi: Vec<f64> = (0..g).map(|j| v[j] / root[j]).collect();
        // largest-magnitude entry positive; first one wins ties
        let lead = phi
            .iter()
            .enumerate()
            .fold(0, |best, (j, x)| if x.abs() > phi[best].abs() { j } else { best });
        if phi[lead] < 0.0 {
            phi.iter_mut().for_each(|x| *x = -*x);
        }
        for (j, x) in phi.into_iter().enumerate() {
            eigenfunctions[(r, j)] = x;
        }
    }

    let mut cumulative = Vec::with_capacity(g);
    let mut acc = 0.0;
    for &l in &eigenvalues {
        acc += l;
        cumulative.push(acc);
    }
    let fve = cumulative.iter().map(|c| c / acc).collect();

    Ok(EigenSystem {
        grid: grid.clone(),
        weights,
        eigenvalues,
        raw_eigenvalues,
        eigenfunctions,
        fve,
    })
}

/// How many components to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KappaPolicy {
    Fixed(usize),
    /// Smallest `k` with cumulative FVE at least `τ ∈ (0, 1)`.
    FveThreshold(f64),
}

pub fn select_kappa(eigsys: &EigenSystem, policy: KappaPolicy) -> Result<usize, FpcaError> {
    let positive = eigsys.positive_count();
    if positive == 0 {
        return Err(FpcaError::NoPositiveEigenvalues);
    }
    match policy {
        KappaPolicy::Fixed(0) => Err(FpcaError::InvalidPolicy("fixed kappa must be >= 1".into())),
        KappaPolicy::Fixed(k) => Ok(k.min(positive)),
        KappaPolicy::FveThreshold(tau) if !(tau > 0.0 && tau < 1.0) => {
            Err(FpcaError::InvalidPolicy(format!("FVE threshold {tau} outside (0, 1)")))
        }
        KappaPolicy::FveThreshold(tau) => Ok(eigsys.fve.iter().position(|&f| f >= tau).map_or(positive, |k| k + 1)),
    }
}

/// Linear interpolation of eigenfunction `r` (0-based) at `t`.
pub fn eval_eigenfunction(eigsys: &EigenSystem, r: usize, t: f64) -> Result<f64, FpcaError> {
    if r >= eigsys.retained() {
        return Err(FpcaError::IndexOutOfRange {
            index: r,
            retained: eigsys.retained(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(FpcaError::TimeOutOfRange(t));
    }
    let pts = eigsys.grid.points();
    let row = eigsys.eigenfunctions.row(r);
    let g = pts.len();
    let t = t.clamp(pts[0], pts[g - 1]);
    let j = pts.partition_point(|&p| p <= t).clamp(1, g - 1) - 1;
    if t == pts[j] {
        return Ok(row[j]);
    }
    if t == pts[j + 1] {
        return Ok(row[j + 1]);
    }
    let f = (t - pts[j]) / (pts[j + 1] - pts[j]);
    Ok(row[j] + f * (row[j + 1] - row[j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, SQRT_2};

    fn decompose(grid: &TimeGrid, values: DMatrix<f64>, quadrature: Quadrature) -> EigenSystem {
        decompose_matrix(
            grid,
            &values,
            EigenOptions {
                quadrature,
                max_components: None,
            },
        )
        .unwrap()
    }

    fn surface(g: usize, f: impl Fn(f64, f64) -> f64) -> (TimeGrid, DMatrix<f64>) {
        let grid = TimeGrid::uniform(g).unwrap();
        let p = grid.points().to_vec();
        (grid, DMatrix::from_fn(g, g, |a, b| f(p[a], p[b])))
    }

    #[test]
    fn scaled_identity_has_flat_spectrum_under_rectangle_rule() {
        let g = 11;
        let grid = TimeGrid::uniform(g).unwrap();
        let c = 2.5;
        let m = DMatrix::identity(g, g) * (c / grid.spacing());
        let es = decompose(&grid, m, Quadrature::Rectangle);
        for l in es.eigenvalues() {
            assert!((l - c).abs() < 1e-10, "{l}");
        }
    }

    #[test]
    fn rank_one_cosine_surface() {
        let lambda = 0.7;
        let phi = |t: f64| SQRT_2 * (PI * t).cos();
        let (grid, m) = surface(51, |s, t| lambda * phi(s) * phi(t));
        let es = decompose(&grid, m, Quadrature::Trapezoid);
        assert!((es.eigenvalues()[0] - lambda).abs() < 1e-6);
        assert!(es.eigenvalues()[1].abs() < 1e-10);
        let truth: Vec<f64> = grid.points().iter().map(|&t| phi(t)).collect();
        let est = es.eigenfunction(0);
        // φ(0) and φ(1) tie in magnitude, so rounding decides the sign
        let sign = est[0].signum();
        let err = est
            .iter()
            .zip(&truth)
            .map(|(a, b)| (sign * a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn brownian_motion_leading_pair() {
        let (grid, m) = surface(101, f64::min);
        let es = decompose(&grid, m, Quadrature::Trapezoid);
        let l1 = 4.0 / (PI * PI);
        assert!((es.eigenvalues()[0] / l1 - 1.0).abs() < 0.01);
        let truth: Vec<f64> = grid.points().iter().map(|&t| SQRT_2 * (PI * t / 2.0).sin()).collect();
        let est = es.eigenfunction(0);
        let diff: Vec<f64> = est.iter().zip(&truth).map(|(a, b)| a - b).collect();
        assert!(es.inner(&diff, &diff).sqrt() < 0.05);
    }

    #[test]
    fn orthonormal_under_own_weights_and_rectangle_norm() {
        let (grid, m) = surface(41, |s, t| (-(s - t).abs()).exp());
        for q in [Quadrature::Trapezoid, Quadrature::Rectangle] {
            let es = decompose(&grid, m.clone(), q);
            for r in 0..es.retained() {
                for l in 0..es.retained() {
                    let ip = es.inner(&es.eigenfunction(r), &es.eigenfunction(l));
                    let expect = if r == l { 1.0 } else { 0.0 };
                    assert!((ip - expect).abs() < 1e-8, "{q:?} {r} {l} {ip}");
                }
            }
            if q == Quadrature::Rectangle {
                let phi = es.eigenfunction(0);
                let norm: f64 = grid.spacing() * phi.iter().map(|x| x * x).sum::<f64>();
                assert!((norm - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn reconstruction_of_psd_projection() {
        // Indefinite symmetric surface: the reconstruction from clipped
        // eigenpairs equals the PSD projection in the weighted metric.
        let (grid, m) = surface(15, |s, t| (3.0 * (s - t)).cos() - 0.4 * (s + t - 1.0).powi(2));
        let es = decompose(&grid, m.clone(), Quadrature::Trapezoid);
        assert_eq!(es.retained(), es.positive_count());
        let w = es.weights().to_vec();
        let root = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(15, w.iter().map(|x| x.sqrt())));
        let eig = SymmetricEigen::new(&root * &m * &root);
        let clipped = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
        let proj_scaled = &eig.eigenvectors * clipped * eig.eigenvectors.transpose();
        let inv_root = root.map(|x| if x > 0.0 { 1.0 / x } else { 0.0 });
        let proj = &inv_root * proj_scaled * &inv_root;
        let phi = es.eigenfunctions();
        let mut rec = DMatrix::zeros(15, 15);
        for r in 0..es.retained() {
            rec += es.eigenvalues()[r] * phi.row(r).transpose() * phi.row(r);
        }
        assert!((rec - proj).amax() < 1e-6);
    }

    #[test]
    fn fve_and_sign_invariants() {
        let (grid, m) = surface(31, |s, t| (-(s - t).powi(2) * 4.0).exp());
        let es = decompose(&grid, m, Quadrature::Trapezoid);
        assert!(es.fve().windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*es.fve().last().unwrap(), 1.0);
        assert!(es.eigenvalues().iter().all(|&l| l >= 0.0));
        assert!(es.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        for r in 0..es.retained() {
            let phi = es.eigenfunction(r);
            let lead = phi
                .iter()
                .cloned()
                .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            assert!(lead > 0.0);
        }
        assert!(es.retained() <= DEFAULT_MAX_COMPONENTS);
    }

    #[test]
    fn kappa_selection() {
        // eigenvalues 1, 1/4, 1/9 on the linear-process cosines
        let lam = [1.0, 0.25, 1.0 / 9.0];
        let (grid, m) = surface(101, |s, t| {
            (1..=3)
                .map(|k| lam[k - 1] * 2.0 * (k as f64 * PI * s).cos() * (k as f64 * PI * t).cos())
                .sum()
        });
        let es = decompose(&grid, m, Quadrature::Trapezoid);
        assert_eq!(select_kappa(&es, KappaPolicy::FveThreshold(0.73)).unwrap(), 1);
        assert!((es.fve()[0] - 36.0 / 49.0).abs() < 1e-6);
        assert_eq!(select_kappa(&es, KappaPolicy::Fixed(2)).unwrap(), 2);
        let positive = es.positive_count();
        assert_eq!(select_kappa(&es, KappaPolicy::Fixed(500)).unwrap(), positive);
        assert_eq!(
            select_kappa(&es, KappaPolicy::FveThreshold(0.99999)).unwrap(),
            es.fve().iter().position(|&f| f >= 0.99999).unwrap() + 1
        );
        assert!(select_kappa(&es, KappaPolicy::Fixed(0)).is_err());
        assert!(select_kappa(&es, KappaPolicy::FveThreshold(1.0)).is_err());
        assert!(select_kappa(&es, KappaPolicy::FveThreshold(0.0)).is_err());
    }

    #[test]
    fn fve_threshold_near_one_takes_all_positive() {
        let lam = [3.0, 2.0, 1.0, 0.5, 0.25];
        let (grid, m) = surface(21, |s, t| {
            (1..=5)
                .map(|k| lam[k - 1] * 2.0 * (k as f64 * PI * s).cos() * (k as f64 * PI * t).cos())
                .sum()
        });
        let es = decompose_matrix(
            &grid,
            &m,
            EigenOptions {
                quadrature: Quadrature::Trapezoid,
                max_components: Some(3),
            },
        )
        .unwrap();
        assert_eq!(es.retained(), 3);
        assert_eq!(select_kappa(&es, KappaPolicy::Fixed(3)).unwrap(), 3);
        // five exact components plus rounding-level positives
        let k = select_kappa(&es, KappaPolicy::FveThreshold(0.99999)).unwrap();
        assert!(k >= 5);
    }

    #[test]
    fn interpolation() {
        let grid = TimeGrid::uniform(3).unwrap();
        let es = EigenSystem {
            grid: grid.clone(),
            weights: Quadrature::Trapezoid.weights(&grid),
            eigenvalues: vec![1.0, 0.0, 0.0],
            raw_eigenvalues: vec![1.0, 0.0, 0.0],
            eigenfunctions: DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 4.0]),
            fve: vec![1.0, 1.0, 1.0],
        };
        assert_eq!(eval_eigenfunction(&es, 0, 0.5).unwrap(), 2.0);
        assert_eq!(eval_eigenfunction(&es, 0, 0.25).unwrap(), 1.5);
        assert_eq!(eval_eigenfunction(&es, 0, 0.0).unwrap(), 1.0);
        assert_eq!(eval_eigenfunction(&es, 0, 1.0).unwrap(), 4.0);
        assert!(eval_eigenfunction(&es, 1, 0.5).is_err());
        assert!(eval_eigenfunction(&es, 0, 1.5).is_err());
    }
}
