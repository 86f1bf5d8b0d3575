//! Extended score vectors, their Jacobian and sample covariance.
//!
//! In the linear model every score is affine in β: `g_i(β) = g_i(0) - D_i β`
//! with `D_i` a stack of `κ` blocks `X_iᵀ M_ik X_i`. [`ScoreModel`] precomputes
//! `g_i(0)` and `D_i` once per dataset so that evaluating the objective at a new
//! β costs `O(n q p)`; [`score_i`] forms the `m_i × m_i` matrices explicitly
//! and serves as a cross-check.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::fpca::{eval_eigenfunction, EigenSystem, FpcaError};
use crate::funcdata::{FunctionalDataset, FunctionalSample, ResidualSet};
use crate::linalg::ridge_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("kappa = {kappa} must lie in 1..={retained}")]
    InvalidKappa { kappa: usize, retained: usize },
    #[error("need n >= q: n = {n}, q = {q}; reduce kappa")]
    TooFewSubjects { n: usize, q: usize },
    #[error("beta has length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("AR(1) basis needs at least 2 observations, got {0}")]
    TooFewTimes(usize),
    #[error("marginal variance must be positive and finite")]
    BadVariance,
    #[error(transparent)]
    Fpca(#[from] FpcaError),
}

/// Diagonal marginal-variance matrix `A_i` used by the CS/AR1 baselines.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum MarginalVariance {
    #[default]
    Identity,
    /// Variance per observation time, linearly interpolated between the
    /// stored (sorted) times.
    PerTime { times: Vec<f64>, variance: Vec<f64> },
}

impl MarginalVariance {
    /// Cross-sectional residual variance at each distinct observation time.
    /// Intended for fixed designs where every subject shares its times.
    pub fn estimate(dataset: &FunctionalDataset, residuals: &ResidualSet) -> Result<Self, ScoreError> {
        let mut obs: Vec<(f64, f64)> = dataset
            .samples()
            .iter()
            .zip(&residuals.residuals)
            .flat_map(|(s, r)| s.times().iter().copied().zip(r.iter().copied()))
            .collect();
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut times = Vec::new();
        let mut variance = Vec::new();
        for group in obs.chunk_by(|a, b| a.0 == b.0) {
            let k = group.len() as f64;
            let mean = group.iter().map(|o| o.1).sum::<f64>() / k;
            let ss = group.iter().map(|o| (o.1 - mean).powi(2)).sum::<f64>();
            let var = if group.len() > 1 {
                ss / (k - 1.0)
            } else {
                group[0].1.powi(2)
            };
            times.push(group[0].0);
            variance.push(var);
        }
        if variance.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(ScoreError::BadVariance);
        }
        Ok(Self::PerTime { times, variance })
    }

    fn at(&self, t: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::PerTime { times, variance } => {
                let j = times.partition_point(|&x| x < t);
                if j < times.len() && times[j] == t {
                    variance[j]
                } else if j == 0 {
                    variance[0]
                } else if j == times.len() {
                    variance[j - 1]
                } else {
                    let f = (t - times[j - 1]) / (times[j] - times[j - 1]);
                    variance[j - 1] + f * (variance[j] - variance[j - 1])
                }
            }
        }
    }

    /// Diagonal of `A_i^{-1/2}` at the given times.
    pub fn inv_sqrt(&self, times: &[f64]) -> Vec<f64> {
        times.iter().map(|&t| 1.0 / self.at(t).sqrt()).collect()
    }
}

/// Which working-correlation expansion the scores use.
#[derive(Debug, Clone)]
pub enum ScoreBasis {
    /// Rank-one blocks built from the first `kappa` estimated eigenfunctions.
    Fpca { eigsys: Arc<EigenSystem>, kappa: usize },
    /// `{I, J}` with `J` the all-ones off-diagonal matrix.
    CompoundSymmetry { variance: MarginalVariance },
    /// `{I, J1, J2}`: identity, first off-diagonals, the two corners.
    Ar1 { variance: MarginalVariance },
}

impl ScoreBasis {
    pub fn fpca(eigsys: Arc<EigenSystem>, kappa: usize) -> Result<Self, ScoreError> {
        if kappa == 0 || kappa > eigsys.retained() {
            return Err(ScoreError::InvalidKappa {
                kappa,
                retained: eigsys.retained(),
            });
        }
        Ok(Self::Fpca { eigsys, kappa })
    }

    pub fn compound_symmetry() -> Self {
        Self::CompoundSymmetry {
            variance: MarginalVariance::Identity,
        }
    }

    pub fn ar1() -> Self {
        Self::Ar1 {
            variance: MarginalVariance::Identity,
        }
    }

    /// Number of blocks `κ`.
    pub fn kappa(&self) -> usize {
        match self {
            Self::Fpca { kappa, .. } => *kappa,
            Self::CompoundSymmetry { .. } => 2,
            Self::Ar1 { .. } => 3,
        }
    }

    pub fn eigen_system(&self) -> Option<&Arc<EigenSystem>> {
        match self {
            Self::Fpca { eigsys, .. } => Some(eigsys),
            _ => None,
        }
    }

    /// The `κ` explicit `m_i × m_i` matrices weighting the residual in each block.
    pub fn sample_matrices(&self, sample: &FunctionalSample) -> Result<Vec<DMatrix<f64>>, ScoreError> {
        let m = sample.len();
        match self {
            Self::Fpca { eigsys, kappa } => (0..*kappa).map(|k| phi_matrix(eigsys, k, sample)).collect(),
            Self::CompoundSymmetry { variance } => {
                let d = DMatrix::from_diagonal(&DVector::from_vec(variance.inv_sqrt(sample.times())));
                Ok(basis_matrices_cs(m).iter().map(|b| &d * b * &d).collect())
            }
            Self::Ar1 { variance } => {
                let d = DMatrix::from_diagonal(&DVector::from_vec(variance.inv_sqrt(sample.times())));
                Ok(basis_matrices_ar1(m)?.iter().map(|b| &d * b * &d).collect())
            }
        }
    }
}

/// `Φ̂_ik`: entry `(j, j')` is `φ̂_k(T_ij) φ̂_k(T_ij') / m_i²`; `k` is 0-based.
pub fn phi_matrix(eigsys: &EigenSystem, k: usize, sample: &FunctionalSample) -> Result<DMatrix<f64>, ScoreError> {
    let phi = phi_values(eigsys, k, sample.times())?;
    let m2 = (sample.len() * sample.len()) as f64;
    Ok(&phi * phi.transpose() / m2)
}

fn phi_values(eigsys: &EigenSystem, k: usize, times: &[f64]) -> Result<DVector<f64>, ScoreError> {
    let vals = times
        .iter()
        .map(|&t| eval_eigenfunction(eigsys, k, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DVector::from_vec(vals))
}

pub fn basis_matrices_cs(m: usize) -> [DMatrix<f64>; 2] {
    let j = DMatrix::from_fn(m, m, |a, b| if a == b { 0.0 } else { 1.0 });
    [DMatrix::identity(m, m), j]
}

pub fn basis_matrices_ar1(m: usize) -> Result<[DMatrix<f64>; 3], ScoreError> {
    if m < 2 {
        return Err(ScoreError::TooFewTimes(m));
    }
    let j1 = DMatrix::from_fn(m, m, |a, b| if a.abs_diff(b) == 1 { 1.0 } else { 0.0 });
    let mut j2 = DMatrix::zeros(m, m);
    j2[(0, 0)] = 1.0;
    j2[(m - 1, m - 1)] = 1.0;
    Ok([DMatrix::identity(m, m), j1, j2])
}

/// Score of one subject through explicit basis matrices.
pub fn score_i(sample: &FunctionalSample, beta: &DVector<f64>, basis: &ScoreBasis) -> Result<DVector<f64>, ScoreError> {
    check_beta(sample.p(), beta)?;
    let x = sample.x();
    let resid = sample.y() - x * beta;
    let mats = basis.sample_matrices(sample)?;
    let blocks: Vec<DVector<f64>> = mats.iter().map(|mk| x.transpose() * (mk * &resid)).collect();
    Ok(stack(&blocks))
}

fn stack(blocks: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        blocks.iter().map(|b| b.len()).sum(),
        blocks.iter().flat_map(|b| b.iter().copied()),
    )
}

fn check_beta(p: usize, beta: &DVector<f64>) -> Result<(), ScoreError> {
    if beta.len() != p {
        return Err(ScoreError::DimensionMismatch {
            expected: p,
            found: beta.len(),
        });
    }
    Ok(())
}

/// Scores, Jacobian and covariance at one β.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    /// `ḡ(β)`, length `q = pκ`.
    pub gbar: DVector<f64>,
    /// Row `i` is `g_i(β)ᵀ`.
    pub per_subject: DMatrix<f64>,
    /// `ġ = ∂ḡ/∂β`, `q × p`; constant in β.
    pub jacobian: DMatrix<f64>,
    /// `Ĉ(β) = n⁻¹ Σ g_i g_iᵀ`, without ridge.
    pub chat: DMatrix<f64>,
    /// Ridge to add to `chat` before inverting, when it is ill-conditioned.
    pub ridge: Option<f64>,
}

impl ScoreSet {
    /// `chat` with the ridge applied.
    pub fn chat_ridged(&self) -> DMatrix<f64> {
        let mut c = self.chat.clone();
        if let Some(eps) = self.ridge {
            for i in 0..c.nrows() {
                c[(i, i)] += eps;
            }
        }
        c
    }
}

/// Precomputed affine score system `g_i(β) = g_i(0) - D_i β`.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    p: usize,
    kappa: usize,
    /// Row `i` is `g_i(0)ᵀ`.
    g0: DMatrix<f64>,
    d: Vec<DMatrix<f64>>,
    dbar: DMatrix<f64>,
}

impl ScoreModel {
    pub fn new(dataset: &FunctionalDataset, basis: &ScoreBasis) -> Result<Self, ScoreError> {
        let p = dataset.p();
        let kappa = basis.kappa();
        if let ScoreBasis::Fpca { eigsys, kappa } = basis {
            if *kappa == 0 || *kappa > eigsys.retained() {
                return Err(ScoreError::InvalidKappa {
                    kappa: *kappa,
                    retained: eigsys.retained(),
                });
            }
        }
        let q = p * kappa;
        let n = dataset.n();
        let mut g0 = DMatrix::zeros(n, q);
        let mut d = Vec::with_capacity(n);
        for (i, sample) in dataset.samples().iter().enumerate() {
            let (gi, di) = subject_system(sample, basis)?;
            g0.row_mut(i).copy_from(&gi.transpose());
            d.push(di);
        }
        let mut dbar = DMatrix::zeros(q, p);
        for di in &d {
            dbar += di;
        }
        dbar /= n as f64;
        Ok(Self { p, kappa, g0, d, dbar })
    }

    pub fn n(&self) -> usize {
        self.g0.nrows()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn q(&self) -> usize {
        self.p * self.kappa
    }

    /// `ġ = -n⁻¹ Σ D_i`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        -&self.dbar
    }

    /// `D_i`, so that `∂g_i/∂β = -D_i`.
    pub fn subject_jacobian(&self, i: usize) -> &DMatrix<f64> {
        &self.d[i]
    }

    /// `ḡ(0)`.
    pub fn gbar0(&self) -> DVector<f64> {
        self.g0.row_mean().transpose()
    }

    pub fn per_subject(&self, beta: &DVector<f64>) -> Result<DMatrix<f64>, ScoreError> {
        check_beta(self.p, beta)?;
        let mut g = self.g0.clone();
        for (i, di) in self.d.iter().enumerate() {
            let shift = di * beta;
            for c in 0..g.ncols() {
                g[(i, c)] -= shift[c];
            }
        }
        Ok(g)
    }

    /// Scores at β with no restriction on `n` versus `q`.
    pub fn evaluate(&self, beta: &DVector<f64>) -> Result<ScoreSet, ScoreError> {
        let per_subject = self.per_subject(beta)?;
        let n = self.n() as f64;
        let gbar = per_subject.row_mean().transpose();
        let chat = crate::linalg::symmetrize(&(per_subject.transpose() * &per_subject / n));
        let ridge = ridge_for(&chat);
        Ok(ScoreSet {
            gbar,
            per_subject,
            jacobian: self.jacobian(),
            chat,
            ridge,
        })
    }
}

/// `(g_i(0), D_i)` for one subject without forming `m_i × m_i` matrices.
fn subject_system(sample: &FunctionalSample, basis: &ScoreBasis) -> Result<(DVector<f64>, DMatrix<f64>), ScoreError> {
    let x = sample.x();
    let y = sample.y();
    let p = sample.p();
    let m = sample.len();
    let mut gi = Vec::new();
    let mut blocks = Vec::new();
    match basis {
        ScoreBasis::Fpca { eigsys, kappa } => {
            // X'ΦX = a aᵀ and X'Φy = a b with a = X'φ/m, b = φ'y/m
            for k in 0..*kappa {
                let phi = phi_values(eigsys, k, sample.times())?;
                let a = x.transpose() * &phi / m as f64;
                let b = phi.dot(y) / m as f64;
                gi.push(&a * b);
                blocks.push(&a * a.transpose());
            }
        }
        ScoreBasis::CompoundSymmetry { variance } | ScoreBasis::Ar1 { variance } => {
            let ar1 = matches!(basis, ScoreBasis::Ar1 { .. });
            if ar1 && m < 2 {
                return Err(ScoreError::TooFewTimes(m));
            }
            let dscale = variance.inv_sqrt(sample.times());
            let xt = DMatrix::from_fn(m, p, |j, c| dscale[j] * x[(j, c)]);
            let yt = DVector::from_fn(m, |j, _| dscale[j] * y[j]);
            let count = if ar1 { 3 } else { 2 };
            for k in 0..count {
                let my = apply_structured(ar1, k, &yt);
                let mx = DMatrix::from_columns(
                    &(0..p)
                        .map(|c| apply_structured(ar1, k, &xt.column(c).into_owned()))
                        .collect::<Vec<_>>(),
                );
                gi.push(xt.transpose() * my);
                blocks.push(xt.transpose() * mx);
            }
        }
    }
    let q = gi.len() * p;
    let d = DMatrix::from_fn(q, p, |r, c| blocks[r / p][(r % p, c)]);
    Ok((stack(&gi), d))
}

/// `M_k v` for the CS (`ar1 = false`) or AR1 basis matrices.
fn apply_structured(ar1: bool, k: usize, v: &DVector<f64>) -> DVector<f64> {
    let m = v.len();
    match (ar1, k) {
        (_, 0) => v.clone(),
        (false, _) => {
            let total = v.sum();
            v.map(|x| total - x)
        }
        (true, 1) => DVector::from_fn(m, |j, _| {
            let left = if j > 0 { v[j - 1] } else { 0.0 };
            let right = if j + 1 < m { v[j + 1] } else { 0.0 };
            left + right
        }),
        (true, _) => DVector::from_fn(m, |j, _| if j == 0 || j + 1 == m { v[j] } else { 0.0 }),
    }
}

/// Scores at β; requires `n ≥ q`.
pub fn gbar_and_chat(
    dataset: &FunctionalDataset,
    beta: &DVector<f64>,
    basis: &ScoreBasis,
) -> Result<ScoreSet, ScoreError> {
    let q = dataset.p() * basis.kappa();
    if dataset.n() < q {
        return Err(ScoreError::TooFewSubjects { n: dataset.n(), q });
    }
    check_beta(dataset.p(), beta)?;
    ScoreModel::new(dataset, basis)?.evaluate(beta)
}
