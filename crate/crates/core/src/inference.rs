//! Sandwich covariance `Σ̂ = B̂⁻¹ Â B̂⁻¹ / n` for the QIF estimator.
//!
//! With `𝒞_i = Σ_{k1,k2} M_ik1 X_i [Ĉ⁻¹]_{k1,k2} X_iᵀ M_ik2`, the two
//! ingredients are `B̂ = n⁻¹ Σ X_iᵀ 𝒞_i X_i` and
//! `Â = n⁻¹ Σ X_iᵀ 𝒞_i ê_i ê_iᵀ 𝒞_i X_i`. Since `X_iᵀ M_ik X_i` is block `k`
//! of `D_i` and `X_iᵀ M_ik ê_i` is block `k` of `g_i(β̂)`, these reduce to
//! `B̂ = n⁻¹ Σ D_iᵀ Ĉ⁻¹ D_i` and `Â = n⁻¹ Σ D_iᵀ Ĉ⁻¹ g_i g_iᵀ Ĉ⁻¹ D_i`,
//! which is what [`sandwich`] computes. [`sandwich_explicit`] goes through
//! `𝒞_i` directly.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::funcdata::{FunctionalDataset, FunctionalSample};
use crate::linalg::{symmetrize, RidgedCholesky};
use crate::qif::FitResult;
use crate::scores::{ScoreBasis, ScoreError, ScoreModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("score covariance is singular even after ridge")]
    SingularCovariance,
    #[error("B is singular")]
    SingularB,
    #[error("expected a {expected}x{expected} matrix, found {rows}x{cols}")]
    Shape { expected: usize, rows: usize, cols: usize },
}

/// `Ĉ⁻¹` partitioned into a `κ × κ` grid of `p × p` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid {
    p: usize,
    kappa: usize,
    inverse: DMatrix<f64>,
}

impl BlockGrid {
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    /// Block `(k1, k2)`, 0-based.
    pub fn block(&self, k1: usize, k2: usize) -> DMatrix<f64> {
        self.inverse
            .view((k1 * self.p, k2 * self.p), (self.p, self.p))
            .into_owned()
    }

    pub fn assemble(&self) -> DMatrix<f64> {
        let q = self.p * self.kappa;
        let mut out = DMatrix::zeros(q, q);
        for k1 in 0..self.kappa {
            for k2 in 0..self.kappa {
                out.view_mut((k1 * self.p, k2 * self.p), (self.p, self.p))
                    .copy_from(&self.block(k1, k2));
            }
        }
        out
    }
}

/// Inverts `chat` (ridge policy applied) and partitions it.
pub fn c_inverse_blocks(chat: &DMatrix<f64>, p: usize, kappa: usize) -> Result<BlockGrid, InferenceError> {
    let q = p * kappa;
    if chat.nrows() != q || chat.ncols() != q {
        return Err(InferenceError::Shape {
            expected: q,
            rows: chat.nrows(),
            cols: chat.ncols(),
        });
    }
    let chol = RidgedCholesky::new(chat).ok_or(InferenceError::SingularCovariance)?;
    Ok(BlockGrid {
        p,
        kappa,
        inverse: chol.inverse(),
    })
}

/// `𝒞_i` for one subject.
pub fn curly_c_i(
    sample: &FunctionalSample,
    blocks: &BlockGrid,
    basis: &ScoreBasis,
) -> Result<DMatrix<f64>, InferenceError> {
    if basis.kappa() != blocks.kappa || sample.p() != blocks.p {
        return Err(InferenceError::Shape {
            expected: blocks.p * blocks.kappa,
            rows: sample.p() * basis.kappa(),
            cols: sample.p() * basis.kappa(),
        });
    }
    let mats = basis.sample_matrices(sample)?;
    let x = sample.x();
    let m = sample.len();
    let mut out = DMatrix::zeros(m, m);
    for (k1, m1) in mats.iter().enumerate() {
        let left = m1 * x;
        for (k2, m2) in mats.iter().enumerate() {
            let right = m2 * x;
            out += &left * blocks.block(k1, k2) * right.transpose();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichVariance {
    /// Variance of β̂ (already divided by `n`).
    pub sigma: DMatrix<f64>,
    pub std_errors: DVector<f64>,
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    /// The basis is not the FPCA one; the same formula is applied by analogy.
    pub analogue: bool,
    /// Ridge added to `Ĉ(β̂)` before inversion.
    pub ridge: Option<f64>,
}

fn assemble(
    a_hat: DMatrix<f64>,
    b_hat: DMatrix<f64>,
    n: usize,
    analogue: bool,
    ridge: Option<f64>,
) -> Result<SandwichVariance, InferenceError> {
    let b_hat = symmetrize(&b_hat);
    let a_hat = symmetrize(&a_hat);
    let b_inv = b_hat.clone().try_inverse().ok_or(InferenceError::SingularB)?;
    if b_inv.iter().any(|v| !v.is_finite()) {
        return Err(InferenceError::SingularB);
    }
    let sigma = symmetrize(&(&b_inv * &a_hat * &b_inv / n as f64));
    let std_errors = sigma.diagonal().map(|v| v.max(0.0).sqrt());
    Ok(SandwichVariance {
        sigma,
        std_errors,
        a_hat,
        b_hat,
        analogue,
        ridge,
    })
}

/// Sandwich variance at `beta` from a prepared score system.
pub fn sandwich_at(
    model: &ScoreModel,
    beta: &DVector<f64>,
    analogue: bool,
) -> Result<SandwichVariance, InferenceError> {
    let scores = model.evaluate(beta)?;
    let chol = RidgedCholesky::new(&scores.chat).ok_or(InferenceError::SingularCovariance)?;
    let p = model.p();
    let n = model.n();
    let mut a_hat = DMatrix::zeros(p, p);
    let mut b_hat = DMatrix::zeros(p, p);
    for i in 0..n {
        let di = model.subject_jacobian(i);
        let cinv_d = chol.solve_mat(di);
        b_hat += di.transpose() * &cinv_d;
        let u = cinv_d.transpose() * scores.per_subject.row(i).transpose();
        a_hat += &u * u.transpose();
    }
    a_hat /= n as f64;
    b_hat /= n as f64;
    assemble(a_hat, b_hat, n, analogue, chol.ridge)
}

pub fn sandwich(
    dataset: &FunctionalDataset,
    fit: &FitResult,
    basis: &ScoreBasis,
) -> Result<SandwichVariance, InferenceError> {
    let model = ScoreModel::new(dataset, basis)?;
    sandwich_at(&model, &fit.beta(), !matches!(basis, ScoreBasis::Fpca { .. }))
}

/// Same quantity through the `m_i × m_i` matrices `𝒞_i`.
pub fn sandwich_explicit(
    dataset: &FunctionalDataset,
    beta: &DVector<f64>,
    basis: &ScoreBasis,
) -> Result<SandwichVariance, InferenceError> {
    let model = ScoreModel::new(dataset, basis)?;
    let scores = model.evaluate(beta)?;
    let blocks = c_inverse_blocks(&scores.chat, dataset.p(), basis.kappa())?;
    let p = dataset.p();
    let n = dataset.n();
    let mut a_hat = DMatrix::zeros(p, p);
    let mut b_hat = DMatrix::zeros(p, p);
    for s in dataset.samples() {
        let cc = curly_c_i(s, &blocks, basis)?;
        let x = s.x();
        let e = s.y() - x * beta;
        b_hat += x.transpose() * &cc * x;
        let u = x.transpose() * (&cc * e);
        a_hat += &u * u.transpose();
    }
    a_hat /= n as f64;
    b_hat /= n as f64;
    assemble(a_hat, b_hat, n, !matches!(basis, ScoreBasis::Fpca { .. }), scores.ridge)
}
