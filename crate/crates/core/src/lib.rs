//! Quadratic inference functions for constant linear-effect models with
//! dense functional responses.
//!
//! The working correlation of the classical QIF estimator is replaced by
//! rank-one blocks built from eigenfunctions of the residual covariance,
//! which is estimated by local linear smoothing of raw residual products.
//! Compound-symmetry and AR(1) bases are available as baselines, and
//! [`harness`] runs Monte-Carlo studies over a family of simulated
//! residual processes.

// `!(x > 0.0)` is used on purpose so that NaN takes the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fpca;
pub mod funcdata;
pub mod harness;
pub mod inference;
pub mod kernelsmooth;
pub mod linalg;
pub mod pipeline;
pub mod qif;
pub mod scores;
pub mod simgen;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] funcdata::DataError),
    #[error(transparent)]
    Smooth(#[from] kernelsmooth::SmoothError),
    #[error(transparent)]
    Fpca(#[from] fpca::FpcaError),
    #[error(transparent)]
    Score(#[from] scores::ScoreError),
    #[error(transparent)]
    Qif(#[from] qif::QifError),
    #[error(transparent)]
    Inference(#[from] inference::InferenceError),
    #[error(transparent)]
    Sim(#[from] simgen::SimError),
    #[error("FPCA-based method requested without a covariance estimate")]
    MissingFpca,
}
