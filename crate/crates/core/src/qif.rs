//! QIF objective `Q(β) = n ḡᵀ Ĉ⁻¹ ḡ` and its quasi-Newton minimizer.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::funcdata::FunctionalDataset;
use crate::linalg::{condition_number, RidgedCholesky, RIDGE_CONDITION_LIMIT};
use crate::scores::{ScoreBasis, ScoreError, ScoreModel, ScoreSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QifError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("score covariance is singular even after ridge")]
    SingularCovariance,
    #[error("Hessian is singular even after ridge")]
    SingularHessian,
    #[error("pooled design matrix is rank deficient (condition number {0:e})")]
    RankDeficient(f64),
    #[error("objective is not finite at beta = {0:?}")]
    NonFinite(Vec<f64>),
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Stop once `‖β2 - β1‖² ≤ epsilon0`.
    pub epsilon0: f64,
    pub max_count: usize,
    pub max_halvings: usize,
    pub basis: ScoreBasis,
}

impl FitConfig {
    pub fn new(basis: ScoreBasis) -> Self {
        Self {
            epsilon0: 1e-10,
            max_count: 500,
            max_halvings: 50,
            basis,
        }
    }

    fn validate(&self) -> Result<(), QifError> {
        if !(self.epsilon0 > 0.0) {
            return Err(QifError::InvalidConfig("epsilon0 must be positive".into()));
        }
        if self.max_count == 0 {
            return Err(QifError::InvalidConfig("max_count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Step below `epsilon0`.
    Converged,
    /// `max_count` iterations without meeting the step tolerance.
    MaxCount,
    /// No descent within `max_halvings` halvings; the last accepted iterate is kept.
    HalvingExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub beta_hat: Vec<f64>,
    pub beta_init: Vec<f64>,
    pub q_value: f64,
    pub q_init: f64,
    pub iterations: usize,
    pub converged: bool,
    pub halving_events: usize,
    /// `Q` at the initial value and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// Accepted `r0` per iteration.
    pub step_lengths: Vec<f64>,
    /// A ridge was added to `Ĉ` or the Hessian at some iterate.
    pub ridge_flag: bool,
    pub termination: Termination,
}

impl FitResult {
    pub fn beta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta_hat)
    }
}

/// `n ḡᵀ Ĉ⁻¹ ḡ`, with the ridge policy applied to `chat`.
pub fn qif_from_parts(n: usize, gbar: &DVector<f64>, chat: &DMatrix<f64>) -> Result<f64, QifError> {
    let chol = RidgedCholesky::new(chat).ok_or(QifError::SingularCovariance)?;
    Ok(n as f64 * gbar.dot(&chol.solve(gbar)))
}

/// Objective, gradient and Gauss-Newton Hessian at one β.
#[derive(Debug, Clone)]
pub struct QifState {
    pub beta: DVector<f64>,
    pub q: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub scores: ScoreSet,
    pub ridged: bool,
}

/// A dataset and basis reduced to their affine score system, optionally with
/// `Ĉ` held fixed.
#[derive(Debug, Clone)]
pub struct QifProblem {
    model: ScoreModel,
    frozen: Option<DMatrix<f64>>,
}

impl QifProblem {
    pub fn new(dataset: &FunctionalDataset, basis: &ScoreBasis) -> Result<Self, QifError> {
        let q = dataset.p() * basis.kappa();
        if dataset.n() < q {
            return Err(ScoreError::TooFewSubjects { n: dataset.n(), q }.into());
        }
        Ok(Self::from_model(ScoreModel::new(dataset, basis)?))
    }

    pub fn from_model(model: ScoreModel) -> Self {
        Self { model, frozen: None }
    }

    pub fn model(&self) -> &ScoreModel {
        &self.model
    }

    /// Holds `Ĉ` at the given matrix for every subsequent evaluation.
    pub fn with_frozen_covariance(mut self, chat: DMatrix<f64>) -> Self {
        self.frozen = Some(chat);
        self
    }

    /// Holds `Ĉ` at its value at β.
    pub fn freeze_at(self, beta: &DVector<f64>) -> Result<Self, QifError> {
        let chat = self.model.evaluate(beta)?.chat;
        Ok(self.with_frozen_covariance(chat))
    }

    pub fn frozen_covariance(&self) -> Option<&DMatrix<f64>> {
        self.frozen.as_ref()
    }

    fn covariance<'a>(&'a self, scores: &'a ScoreSet) -> &'a DMatrix<f64> {
        self.frozen.as_ref().unwrap_or(&scores.chat)
    }

    pub fn value(&self, beta: &DVector<f64>) -> Result<f64, QifError> {
        let scores = self.model.evaluate(beta)?;
        qif_from_parts(self.model.n(), &scores.gbar, self.covariance(&scores))
    }

    pub fn evaluate(&self, beta: &DVector<f64>) -> Result<QifState, QifError> {
        let scores = self.model.evaluate(beta)?;
        let cov = self.covariance(&scores);
        let chol = RidgedCholesky::new(cov).ok_or(QifError::SingularCovariance)?;
        let n = self.model.n() as f64;
        let cinv_g = chol.solve(&scores.gbar);
        let cinv_jac = chol.solve_mat(&scores.jacobian);
        let q = n * scores.gbar.dot(&cinv_g);
        let gradient = 2.0 * n * scores.jacobian.transpose() * cinv_g;
        let hessian = crate::linalg::symmetrize(&(2.0 * n * scores.jacobian.transpose() * cinv_jac));
        Ok(QifState {
            beta: beta.clone(),
            q,
            gradient,
            hessian,
            ridged: chol.ridge.is_some(),
            scores,
        })
    }
}

/// Pooled least squares over all observations.
pub fn ols_initial(dataset: &FunctionalDataset) -> Result<DVector<f64>, QifError> {
    let p = dataset.p();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for s in dataset.samples() {
        xtx += s.x().transpose() * s.x();
        xty += s.x().transpose() * s.y();
    }
    let cond = condition_number(&xtx);
    if cond > RIDGE_CONDITION_LIMIT {
        return Err(QifError::RankDeficient(cond));
    }
    let chol = xtx.cholesky().ok_or(QifError::RankDeficient(cond))?;
    Ok(chol.solve(&xty))
}

pub fn qif_value(dataset: &FunctionalDataset, beta: &DVector<f64>, basis: &ScoreBasis) -> Result<f64, QifError> {
    QifProblem::new(dataset, basis)?.value(beta)
}

/// `2n ġᵀ Ĉ(β)⁻¹ ḡ(β)`, treating `Ĉ` as fixed.
pub fn qif_gradient(
    dataset: &FunctionalDataset,
    beta: &DVector<f64>,
    basis: &ScoreBasis,
) -> Result<DVector<f64>, QifError> {
    Ok(QifProblem::new(dataset, basis)?.evaluate(beta)?.gradient)
}

/// `2n ġᵀ Ĉ(β)⁻¹ ġ`.
pub fn qif_hessian(
    dataset: &FunctionalDataset,
    beta: &DVector<f64>,
    basis: &ScoreBasis,
) -> Result<DMatrix<f64>, QifError> {
    Ok(QifProblem::new(dataset, basis)?.evaluate(beta)?.hessian)
}

/// Minimizes `Q` from the OLS estimate.
pub fn fit_quasi_newton_halving(dataset: &FunctionalDataset, config: &FitConfig) -> Result<FitResult, QifError> {
    let problem = QifProblem::new(dataset, &config.basis)?;
    let beta0 = ols_initial(dataset)?;
    minimize(&problem, &beta0, config)
}

/// Quasi-Newton iteration with step halving from `beta0`.
///
/// Each step is `β2 = β1 - r0 Q̈(β1)⁻¹ Q̇(β1)`; `r0` starts at 1 and is halved
/// until `Q(β2) ≤ Q(β1)`, with `Q(β2)` evaluated at its own `Ĉ(β2)` unless the
/// problem is frozen. Stops when `‖β2 - β1‖² ≤ ε0` or after `max_count` steps.
pub fn minimize(problem: &QifProblem, beta0: &DVector<f64>, config: &FitConfig) -> Result<FitResult, QifError> {
    config.validate()?;
    let finite = |q: f64, b: &DVector<f64>| {
        if q.is_finite() {
            Ok(q)
        } else {
            Err(QifError::NonFinite(b.as_slice().to_vec()))
        }
    };

    let mut beta1 = beta0.clone();
    let mut state = problem.evaluate(&beta1)?;
    let q_init = finite(state.q, &beta1)?;
    let mut q1 = q_init;
    let mut ridge_flag = state.ridged;
    let mut objective_trace = vec![q1];
    let mut step_lengths = Vec::new();
    let mut halving_events = 0;
    let mut iterations = 0;
    let mut termination = Termination::MaxCount;

    for count in 1..=config.max_count {
        let hess = RidgedCholesky::new(&state.hessian).ok_or(QifError::SingularHessian)?;
        ridge_flag |= hess.ridge.is_some();
        let direction = hess.solve(&state.gradient);

        let mut r0 = 1.0;
        let mut beta2 = &beta1 - &direction * r0;
        let mut q2 = problem.value(&beta2)?;
        let mut halvings = 0;
        // NaN never counts as descent
        while !(q2 <= q1) {
            if halvings == config.max_halvings {
                break;
            }
            r0 /= 2.0;
            beta2 = &beta1 - &direction * r0;
            q2 = problem.value(&beta2)?;
            halvings += 1;
        }
        halving_events += halvings;
        if !(q2 <= q1) {
            termination = if direction.norm_squared() <= config.epsilon0 {
                Termination::Converged
            } else {
                Termination::HalvingExhausted
            };
            break;
        }

        let error = (&beta2 - &beta1).norm_squared();
        beta1 = beta2;
        q1 = q2;
        iterations = count;
        objective_trace.push(q1);
        step_lengths.push(r0);
        if error <= config.epsilon0 {
            termination = Termination::Converged;
            break;
        }
        state = problem.evaluate(&beta1)?;
        ridge_flag |= state.ridged;
    }

    Ok(FitResult {
        beta_hat: beta1.as_slice().to_vec(),
        beta_init: beta0.as_slice().to_vec(),
        q_value: q1,
        q_init,
        iterations,
        converged: termination == Termination::Converged,
        halving_events,
        objective_trace,
        step_lengths,
        ridge_flag,
        termination,
    })
}
