//! Simulated dense functional data with known residual covariance.
//!
//! Seeding: replication `b` of a study seeded with `seed` draws its own seed
//! from ChaCha8 stream `b` under `seed`, and subject `i` of that replication
//! uses ChaCha8 stream `i` under the replication seed. Replications and
//! subjects can therefore be generated in any order.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::funcdata::{DataError, FunctionalDataset, FunctionalSample, TimeGrid};

/// Number of Karhunen-Loève terms kept for the eigen-specified scenarios.
pub const KL_TRUNCATION: usize = 3;

/// Relative size below which negative covariance eigenvalues count as rounding.
const PSD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    #[error("scenario parameters outside the supported set: {0} (pass --unsafe-params to allow)")]
    UnsafeParams(String),
    #[error("invalid scenario parameter: {0}")]
    InvalidParam(String),
    #[error("no root of the OU frequency equation in ({lo}, {hi})")]
    BracketFailure { lo: f64, hi: f64 },
    #[error("need n >= 1 and m >= 2, got n = {n}, m = {m}")]
    BadSize { n: usize, m: usize },
    #[error("covariate model has {found} rows for {expected} coefficients")]
    CovariateMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    BrownianMotion,
    LinearProcess { l0: u32 },
    OrnsteinUhlenbeck { mu0: f64 },
    PowerExponential { a0: f64, b0: f64 },
    RationalQuadratic { a0: f64, b0: f64 },
}

impl Scenario {
    /// Parses a token such as `bm`, `lp2`, `ou3`, `pe5`, `rq1`. Parameters
    /// outside the standard sets are rejected unless `allow_unsafe`.
    pub fn parse_with(token: &str, allow_unsafe: bool) -> Result<Self, SimError> {
        let token = token.trim().to_ascii_lowercase();
        let unknown = || SimError::UnknownScenario(token.clone());
        if token == "bm" {
            return Ok(Self::BrownianMotion);
        }
        if token.len() < 3 || !token.is_char_boundary(2) {
            return Err(unknown());
        }
        let (prefix, rest) = token.split_at(2);
        let value: f64 = rest.parse().map_err(|_| unknown())?;
        let scenario = match prefix {
            "lp" => {
                if value.fract() != 0.0 || !(1.0..=u32::MAX as f64).contains(&value) {
                    return Err(SimError::InvalidParam(format!(
                        "l0 must be a positive integer, got {rest}"
                    )));
                }
                Self::LinearProcess { l0: value as u32 }
            }
            "ou" => Self::OrnsteinUhlenbeck { mu0: value },
            "pe" => Self::PowerExponential { a0: 1.0, b0: value },
            "rq" => Self::RationalQuadratic { a0: 1.0, b0: value },
            _ => return Err(unknown()),
        };
        scenario.validate(allow_unsafe)?;
        Ok(scenario)
    }

    /// Whether the parameters are among the standard choices.
    pub fn is_standard(&self) -> bool {
        match *self {
            Self::BrownianMotion => true,
            Self::LinearProcess { l0 } => (1..=3).contains(&l0),
            Self::OrnsteinUhlenbeck { mu0 } => mu0 == 1.0 || mu0 == 3.0,
            Self::PowerExponential { a0, b0 } | Self::RationalQuadratic { a0, b0 } => {
                a0 == 1.0 && [1.0, 2.0, 5.0].contains(&b0)
            }
        }
    }

    pub fn validate(&self, allow_unsafe: bool) -> Result<(), SimError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SimError::InvalidParam(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        match *self {
            Self::BrownianMotion => {}
            Self::LinearProcess { l0 } => {
                if l0 == 0 {
                    return Err(SimError::InvalidParam("l0 must be at least 1".into()));
                }
            }
            Self::OrnsteinUhlenbeck { mu0 } => positive("mu0", mu0)?,
            Self::PowerExponential { a0, b0 } | Self::RationalQuadratic { a0, b0 } => {
                positive("a0", a0)?;
                positive("b0", b0)?;
            }
        }
        if !allow_unsafe && !self.is_standard() {
            return Err(SimError::UnsafeParams(self.to_string()));
        }
        Ok(())
    }

    /// True eigenpairs for the scenarios specified through a truncated
    /// Karhunen-Loève expansion; `None` for the covariance-specified ones.
    pub fn kl_eigen(&self) -> Result<Option<Vec<EigenPair>>, SimError> {
        let ks = 1..=KL_TRUNCATION;
        Ok(match *self {
            Self::BrownianMotion => Some(ks.map(bm_eigen).collect()),
            Self::LinearProcess { l0 } => Some(ks.map(|k| linear_process_eigen(k, l0)).collect()),
            Self::OrnsteinUhlenbeck { mu0 } => Some(ou_eigen_pairs(mu0, KL_TRUNCATION)?),
            _ => None,
        })
    }
}

impl FromStr for Scenario {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_with(s, false)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::BrownianMotion => write!(f, "bm"),
            Self::LinearProcess { l0 } => write!(f, "lp{l0}"),
            Self::OrnsteinUhlenbeck { mu0 } => write!(f, "ou{mu0}"),
            Self::PowerExponential { b0, .. } => write!(f, "pe{b0}"),
            Self::RationalQuadratic { b0, .. } => write!(f, "rq{b0}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    /// `√2 sin(ω t)`
    Sine(f64),
    /// `√2 cos(ω t)`
    Cosine(f64),
    /// `A cos(ω t) + B sin(ω t)`
    Mixed { omega: f64, a: f64, b: f64 },
}

/// An eigenvalue with its closed-form eigenfunction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenPair {
    pub lambda: f64,
    shape: Shape,
}

impl EigenPair {
    pub fn phi(&self, t: f64) -> f64 {
        match self.shape {
            Shape::Sine(w) => SQRT_2 * (w * t).sin(),
            Shape::Cosine(w) => SQRT_2 * (w * t).cos(),
            Shape::Mixed { omega, a, b } => a * (omega * t).cos() + b * (omega * t).sin(),
        }
    }
}

/// Brownian motion on `[0, 1]`: `λ_k = 4/(π²(2k-1)²)`, `φ_k(t) = √2 sin(t/√λ_k)`.
pub fn bm_eigen(k: usize) -> EigenPair {
    assert!(k >= 1, "eigen index is 1-based");
    let lambda = 4.0 / (PI * PI * ((2 * k - 1) as f64).powi(2));
    EigenPair {
        lambda,
        shape: Shape::Sine(1.0 / lambda.sqrt()),
    }
}

/// `λ_k = k^{-2 l0}`, `φ_k(t) = √2 cos(kπt)`.
pub fn linear_process_eigen(k: usize, l0: u32) -> EigenPair {
    assert!(k >= 1, "eigen index is 1-based");
    EigenPair {
        lambda: (k as f64).powf(-2.0 * l0 as f64),
        shape: Shape::Cosine(k as f64 * PI),
    }
}

/// The first `count` positive roots of `cot ω = (ω² - μ0²)/(2 μ0 ω)`.
///
/// The difference of the two sides is strictly decreasing between poles of
/// `cot`, running from `+∞` to `-∞` on each `((j-1)π, jπ)`, so every such
/// interval holds exactly one root.
pub fn ou_roots(mu0: f64, count: usize) -> Result<Vec<f64>, SimError> {
    if !(mu0.is_finite() && mu0 > 0.0) {
        return Err(SimError::InvalidParam(format!("mu0 must be positive, got {mu0}")));
    }
    let f = |w: f64| 1.0 / w.tan() - (w * w - mu0 * mu0) / (2.0 * mu0 * w);
    (1..=count)
        .map(|j| {
            let lo0 = (j - 1) as f64 * PI + 1e-9;
            let hi0 = j as f64 * PI - 1e-9;
            let (mut lo, mut hi) = (lo0, hi0);
            if !(f(lo) > 0.0 && f(hi) < 0.0) {
                return Err(SimError::BracketFailure { lo: lo0, hi: hi0 });
            }
            while hi - lo > 1e-13 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(0.5 * (lo + hi))
        })
        .collect()
}

fn ou_pair(omega: f64, mu0: f64) -> EigenPair {
    let a = (2.0 * omega * omega / (2.0 * mu0 + mu0 * mu0 + omega * omega)).sqrt();
    EigenPair {
        lambda: 2.0 * mu0 / (omega * omega + mu0 * mu0),
        shape: Shape::Mixed {
            omega,
            a,
            b: mu0 * a / omega,
        },
    }
}

fn ou_eigen_pairs(mu0: f64, count: usize) -> Result<Vec<EigenPair>, SimError> {
    Ok(ou_roots(mu0, count)?.into_iter().map(|w| ou_pair(w, mu0)).collect())
}

/// Eigenpair `k` (1-based) of the OU covariance `exp(-μ0 |s - t|)`.
pub fn ou_eigen(k: usize, mu0: f64) -> Result<EigenPair, SimError> {
    assert!(k >= 1, "eigen index is 1-based");
    let roots = ou_roots(mu0, k)?;
    Ok(ou_pair(roots[k - 1], mu0))
}

/// Residual covariance on `grid`: the truncated expansion for the
/// eigen-specified scenarios, the kernel itself otherwise.
pub fn cov_matrix(scenario: &Scenario, grid: &TimeGrid) -> Result<DMatrix<f64>, SimError> {
    let t = grid.points();
    let g = t.len();
    Ok(match (scenario.kl_eigen()?, *scenario) {
        (Some(pairs), _) => {
            let mut r = DMatrix::zeros(g, g);
            for pair in &pairs {
                let phi = DVector::from_iterator(g, t.iter().map(|&x| pair.phi(x)));
                r += pair.lambda * &phi * phi.transpose();
            }
            r
        }
        (None, Scenario::PowerExponential { a0, b0 }) => {
            DMatrix::from_fn(g, g, |a, b| (-((t[a] - t[b]).abs() / a0).powf(b0)).exp())
        }
        (None, Scenario::RationalQuadratic { a0, b0 }) => {
            DMatrix::from_fn(g, g, |a, b| (1.0 + (t[a] - t[b]).powi(2) / (a0 * a0)).powf(-b0))
        }
        (None, _) => unreachable!("eigen-specified scenarios always have pairs"),
    })
}

/// Standard deviations of the three basis coefficients of every covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateModel {
    pub sds: Vec<[f64; 3]>,
}

impl CovariateModel {
    /// `x_k(t) = χ1 + χ2 √2 sin πt + χ3 √2 cos πt` with SDs
    /// `σ_k = 2^{-(k-1)/2}`, `0.85 σ_k`, `0.7 σ_k`.
    pub fn standard(p: usize) -> Self {
        Self {
            sds: (1..=p)
                .map(|k| {
                    let s = 2f64.powf(-0.5 * (k as f64 - 1.0));
                    [s, 0.85 * s, 0.7 * s]
                })
                .collect(),
        }
    }

    pub fn p(&self) -> usize {
        self.sds.len()
    }
}

/// Generation settings beyond the scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub m: usize,
    pub beta: Vec<f64>,
    pub covariates: CovariateModel,
    /// Multiplies every residual draw; 0 gives noiseless responses.
    pub residual_scale: f64,
}

impl SimSpec {
    pub fn new(scenario: Scenario, n: usize, m: usize, beta: Vec<f64>) -> Self {
        let p = beta.len();
        Self {
            scenario,
            n,
            m,
            beta,
            covariates: CovariateModel::standard(p),
            residual_scale: 1.0,
        }
    }
}

/// What the generator knows that the estimator does not.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTruth {
    pub beta: Vec<f64>,
    pub grid: TimeGrid,
    pub eigen: Option<Vec<EigenPair>>,
    /// Covariance the residuals were drawn from, after any PSD projection.
    pub cov: DMatrix<f64>,
    /// The scenario's kernel was indefinite on the grid and was projected.
    pub psd_projected: bool,
    /// Residual draw of every subject (already scaled).
    pub residuals: Vec<DVector<f64>>,
}

/// Seed of replication `b` under a study seed.
pub fn replication_seed(seed: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b);
    rng.next_u64()
}

enum ResidualDraw {
    Kl(Vec<(f64, DVector<f64>)>),
    Factor(DMatrix<f64>),
}

/// Symmetric square root of `cov` with negative eigenvalues set to zero.
/// Returns the factor and whether anything beyond rounding was removed.
fn psd_factor(cov: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.amax();
    let projected = eig.eigenvalues.iter().any(|&l| l < -PSD_TOLERANCE * max);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let factor = &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
    (factor, projected)
}

/// Draws a dataset; identical `(spec, seed)` give bitwise-identical output.
pub fn generate(spec: &SimSpec, seed: u64) -> Result<(FunctionalDataset, SimulatedTruth), SimError> {
    let (n, m, p) = (spec.n, spec.m, spec.beta.len());
    if n == 0 || m < 2 {
        return Err(SimError::BadSize { n, m });
    }
    if spec.covariates.p() != p {
        return Err(SimError::CovariateMismatch {
            expected: p,
            found: spec.covariates.p(),
        });
    }
    spec.scenario.validate(true)?;
    let grid = TimeGrid::uniform(m)?;
    let t = grid.points().to_vec();
    let eigen = spec.scenario.kl_eigen()?;
    let mut cov = cov_matrix(&spec.scenario, &grid)?;
    let mut psd_projected = false;
    let draw = match &eigen {
        Some(pairs) => ResidualDraw::Kl(
            pairs
                .iter()
                .map(|pr| {
                    (
                        pr.lambda.sqrt(),
                        DVector::from_iterator(m, t.iter().map(|&x| pr.phi(x))),
                    )
                })
                .collect(),
        ),
        None => {
            let (factor, projected) = psd_factor(&cov);
            if projected {
                log::warn!(
                    "{} covariance is not positive semi-definite on the grid; drawing from its PSD projection",
                    spec.scenario
                );
                cov = &factor * &factor;
                psd_projected = true;
            }
            ResidualDraw::Factor(factor)
        }
    };

    let sin_t: Vec<f64> = t.iter().map(|&x| SQRT_2 * (PI * x).sin()).collect();
    let cos_t: Vec<f64> = t.iter().map(|&x| SQRT_2 * (PI * x).cos()).collect();
    let beta = DVector::from_column_slice(&spec.beta);

    let mut samples = Vec::with_capacity(n);
    let mut residuals = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut x = DMatrix::zeros(m, p);
        for (k, sd) in spec.covariates.sds.iter().enumerate() {
            let chi: [f64; 3] = std::array::from_fn(|c| sd[c] * rng.sample::<f64, _>(StandardNormal));
            for j in 0..m {
                x[(j, k)] = chi[0] + chi[1] * sin_t[j] + chi[2] * cos_t[j];
            }
        }
        let e = match &draw {
            ResidualDraw::Kl(terms) => {
                let mut e = DVector::zeros(m);
                for (sd, phi) in terms {
                    let xi = sd * rng.sample::<f64, _>(StandardNormal);
                    e.axpy(xi, phi, 1.0);
                }
                e
            }
            ResidualDraw::Factor(l) => {
                let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                l * z
            }
        } * spec.residual_scale;
        let y = &x * &beta + &e;
        samples.push(FunctionalSample::new(format!("s{}", i + 1), t.clone(), y, x)?);
        residuals.push(e);
    }

    let truth = SimulatedTruth {
        beta: spec.beta.clone(),
        grid,
        eigen,
        cov,
        psd_projected,
        residuals,
    };
    Ok((FunctionalDataset::new(samples)?, truth))
}

pub fn gen_dataset(
    scenario: Scenario,
    n: usize,
    m: usize,
    beta: &[f64],
    seed: u64,
) -> Result<(FunctionalDataset, SimulatedTruth), SimError> {
    generate(&SimSpec::new(scenario, n, m, beta.to_vec()), seed)
}
