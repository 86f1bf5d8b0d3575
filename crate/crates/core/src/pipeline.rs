//! End-to-end estimation shared by the CLI and the simulation harness.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DVector;

use crate::fpca::{eigen_decompose_with, select_kappa, EigenOptions, EigenSystem, KappaPolicy, Quadrature};
use crate::funcdata::{residuals, FunctionalDataset, TimeGrid};
use crate::inference::{sandwich_at, SandwichVariance};
use crate::kernelsmooth::{
    raw_cov_pairs, select_bandwidth_gcv, smooth_cov_surface, GcvScore, KernelSpec, PairWeighting, SmoothedCovariance,
    DEFAULT_BANDWIDTHS, DEFAULT_GRID_SIZE,
};
use crate::qif::{minimize, ols_initial, FitConfig, FitResult, QifProblem};
use crate::scores::{MarginalVariance, ScoreBasis};
use crate::Error;

/// Default FVE threshold for `fda-auto`.
pub const DEFAULT_FVE_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Pooled OLS.
    Init,
    /// QIF with the compound-symmetry basis.
    LdaCs,
    /// QIF with the AR(1) basis.
    LdaAr,
    /// QIF with the first `k` estimated eigenfunctions.
    Fda(usize),
    /// QIF with the smallest `k` reaching the FVE threshold.
    FdaAuto(f64),
}

impl Method {
    pub fn is_fda(&self) -> bool {
        matches!(self, Self::Fda(_) | Self::FdaAuto(_))
    }
}

impl FromStr for Method {
    type Err = String;

    /// Accepts `init`, `ldaCS`/`cs`, `ldaAR`/`ar1`, `fda-<k>`, `fda-auto` and
    /// `fda-auto:<τ>`, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tok = s.trim().to_ascii_lowercase();
        match tok.as_str() {
            "init" | "ols" => return Ok(Self::Init),
            "ldacs" | "cs" => return Ok(Self::LdaCs),
            "ldaar" | "ar" | "ar1" => return Ok(Self::LdaAr),
            "fda-auto" => return Ok(Self::FdaAuto(DEFAULT_FVE_THRESHOLD)),
            _ => {}
        }
        if let Some(tau) = tok.strip_prefix("fda-auto:") {
            let tau: f64 = tau.parse().map_err(|_| format!("bad FVE threshold in '{s}'"))?;
            if !(tau > 0.0 && tau < 1.0) {
                return Err(format!("FVE threshold must lie in (0, 1), got {tau}"));
            }
            return Ok(Self::FdaAuto(tau));
        }
        if let Some(k) = tok.strip_prefix("fda-") {
            let k: usize = k.parse().map_err(|_| format!("bad component count in '{s}'"))?;
            if k == 0 {
                return Err("fda-k needs k >= 1".into());
            }
            return Ok(Self::Fda(k));
        }
        Err(format!("unknown method '{s}'"))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Init => write!(f, "init"),
            Self::LdaCs => write!(f, "ldaCS"),
            Self::LdaAr => write!(f, "ldaAR"),
            Self::Fda(k) => write!(f, "fda-{k}"),
            Self::FdaAuto(tau) => write!(f, "fda-auto:{tau}"),
        }
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>, String> {
    let methods: Vec<Method> = list
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err("method list is empty".into());
    }
    Ok(methods)
}

#[derive(Debug, Clone, PartialEq)]
pub enum BandwidthPolicy {
    Fixed(f64),
    Gcv(Vec<f64>),
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        Self::Gcv(DEFAULT_BANDWIDTHS.to_vec())
    }
}

impl FromStr for BandwidthPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("gcv") {
            return Ok(Self::default());
        }
        let h: f64 = s
            .trim()
            .parse()
            .map_err(|_| format!("bandwidth must be 'gcv' or a number, got '{s}'"))?;
        if !(h.is_finite() && h > 0.0) {
            return Err(format!("bandwidth must be positive, got {h}"));
        }
        Ok(Self::Fixed(h))
    }
}

impl fmt::Display for BandwidthPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(h) => write!(f, "{h}"),
            Self::Gcv(_) => write!(f, "gcv"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMode {
    #[default]
    Identity,
    /// Cross-sectional residual variance per observation time.
    PerTime,
}

/// Everything that controls an estimate apart from the data and the method.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub grid_size: usize,
    pub bandwidth: BandwidthPolicy,
    pub weighting: PairWeighting,
    pub quadrature: Quadrature,
    pub variance: VarianceMode,
    pub epsilon0: f64,
    pub max_count: usize,
    pub max_halvings: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            grid_size: DEFAULT_GRID_SIZE,
            bandwidth: BandwidthPolicy::default(),
            weighting: PairWeighting::PerSubject,
            quadrature: Quadrature::Trapezoid,
            variance: VarianceMode::Identity,
            epsilon0: 1e-10,
            max_count: 500,
            max_halvings: 50,
        }
    }
}

impl FitSettings {
    fn fit_config(&self, basis: ScoreBasis) -> FitConfig {
        FitConfig {
            epsilon0: self.epsilon0,
            max_count: self.max_count,
            max_halvings: self.max_halvings,
            basis,
        }
    }
}

/// Covariance estimate shared by every FPCA-based fit on one dataset.
#[derive(Debug, Clone)]
pub struct FdaPrep {
    pub beta_init: DVector<f64>,
    pub surface: SmoothedCovariance,
    pub gcv_scores: Option<Vec<GcvScore>>,
    pub eigsys: Arc<EigenSystem>,
}

impl FdaPrep {
    pub fn bandwidth(&self) -> f64 {
        self.surface.bandwidth
    }
}

/// OLS, residual pairs, smoothed covariance and its eigendecomposition.
pub fn prepare_fda(dataset: &FunctionalDataset, settings: &FitSettings) -> Result<FdaPrep, Error> {
    let beta_init = ols_initial(dataset)?;
    let resid = residuals(dataset, &beta_init)?;
    let pairs = raw_cov_pairs(dataset, &resid, settings.weighting);
    let grid = TimeGrid::uniform(settings.grid_size)?;
    let (surface, gcv_scores) = match &settings.bandwidth {
        BandwidthPolicy::Fixed(h) => (smooth_cov_surface(&pairs, &grid, &KernelSpec::epanechnikov(*h)?)?, None),
        BandwidthPolicy::Gcv(candidates) => {
            // a coarse grid rules out the smallest candidates
            let usable: Vec<f64> = candidates.iter().copied().filter(|&h| h > grid.spacing()).collect();
            if usable.len() < candidates.len() {
                log::info!("dropping GCV candidates not above the grid spacing {}", grid.spacing());
            }
            let usable = if usable.is_empty() { candidates.clone() } else { usable };
            let sel = select_bandwidth_gcv(&pairs, &grid, &usable)?;
            (sel.surface, Some(sel.scores))
        }
    };
    let eigsys = eigen_decompose_with(
        &surface,
        EigenOptions {
            quadrature: settings.quadrature,
            max_components: None,
        },
    )?;
    Ok(FdaPrep {
        beta_init,
        surface,
        gcv_scores,
        eigsys: Arc::new(eigsys),
    })
}

/// One method's estimate on one dataset.
#[derive(Debug, Clone)]
pub struct MethodFit {
    pub method: Method,
    pub beta_hat: DVector<f64>,
    /// Optimizer diagnostics; `None` for `init`.
    pub fit: Option<FitResult>,
    pub sandwich: Option<SandwichVariance>,
    pub kappa: Option<usize>,
    /// Cumulative FVE at `kappa`, as a fraction.
    pub fve: Option<f64>,
    pub bandwidth: Option<f64>,
}

impl MethodFit {
    /// `init` always counts as converged.
    pub fn converged(&self) -> bool {
        self.fit.as_ref().is_none_or(|f| f.converged)
    }
}

/// Basis for a QIF method; `prep` must be given for the FPCA methods.
pub fn basis_for(
    method: Method,
    dataset: &FunctionalDataset,
    settings: &FitSettings,
    prep: Option<&FdaPrep>,
    beta_init: &DVector<f64>,
) -> Result<Option<(ScoreBasis, Option<usize>)>, Error> {
    let variance = || -> Result<MarginalVariance, Error> {
        Ok(match settings.variance {
            VarianceMode::Identity => MarginalVariance::Identity,
            VarianceMode::PerTime => MarginalVariance::estimate(dataset, &residuals(dataset, beta_init)?)?,
        })
    };
    Ok(match method {
        Method::Init => None,
        Method::LdaCs => Some((ScoreBasis::CompoundSymmetry { variance: variance()? }, None)),
        Method::LdaAr => Some((ScoreBasis::Ar1 { variance: variance()? }, None)),
        Method::Fda(_) | Method::FdaAuto(_) => {
            let prep = prep.ok_or(Error::MissingFpca)?;
            let policy = match method {
                Method::Fda(k) => KappaPolicy::Fixed(k),
                Method::FdaAuto(tau) => KappaPolicy::FveThreshold(tau),
                _ => unreachable!(),
            };
            let kappa = select_kappa(&prep.eigsys, policy)?.min(prep.eigsys.retained());
            Some((ScoreBasis::fpca(prep.eigsys.clone(), kappa)?, Some(kappa)))
        }
    })
}

/// Fits one method. FPCA methods reuse `prep`, which is computed on demand
/// when absent.
pub fn fit_method(
    dataset: &FunctionalDataset,
    method: Method,
    settings: &FitSettings,
    prep: Option<&FdaPrep>,
) -> Result<MethodFit, Error> {
    let owned;
    let prep = match (prep, method.is_fda()) {
        (Some(p), _) => Some(p),
        (None, true) => {
            owned = prepare_fda(dataset, settings)?;
            Some(&owned)
        }
        (None, false) => None,
    };
    let beta_init = match prep {
        Some(p) => p.beta_init.clone(),
        None => ols_initial(dataset)?,
    };
    let Some((basis, kappa)) = basis_for(method, dataset, settings, prep, &beta_init)? else {
        return Ok(MethodFit {
            method,
            beta_hat: beta_init,
            fit: None,
            sandwich: None,
            kappa: None,
            fve: None,
            bandwidth: None,
        });
    };
    let problem = QifProblem::new(dataset, &basis)?;
    let fit = minimize(&problem, &beta_init, &settings.fit_config(basis.clone()))?;
    let beta_hat = fit.beta();
    let sandwich = match sandwich_at(problem.model(), &beta_hat, !method.is_fda()) {
        Ok(s) => Some(s),
        Err(e) => {
            log::warn!("{method}: sandwich variance unavailable: {e}");
            None
        }
    };
    Ok(MethodFit {
        method,
        beta_hat,
        fit: Some(fit),
        sandwich,
        kappa,
        fve: kappa.zip(prep).map(|(k, p)| p.eigsys.fve_at(k)),
        bandwidth: prep.filter(|_| method.is_fda()).map(FdaPrep::bandwidth),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{gen_dataset, Scenario};

    #[test]
    fn method_tokens() {
        for (tok, m) in [
            ("init", Method::Init),
            ("ldaCS", Method::LdaCs),
            ("ldaAR", Method::LdaAr),
            ("fda-3", Method::Fda(3)),
            ("fda-auto:0.9", Method::FdaAuto(0.9)),
        ] {
            assert_eq!(tok.parse::<Method>().unwrap(), m);
            assert_eq!(m.to_string(), tok);
        }
        assert_eq!(
            "fda-auto".parse::<Method>().unwrap(),
            Method::FdaAuto(DEFAULT_FVE_THRESHOLD)
        );
        assert_eq!("AR1".parse::<Method>().unwrap(), Method::LdaAr);
        for bad in ["fda-0", "fda-x", "fda-auto:1", "fda-auto:0", "lda", ""] {
            assert!(bad.parse::<Method>().is_err(), "{bad}");
        }
        assert_eq!(
            parse_methods("init, fda-2,ldaCS").unwrap(),
            vec![Method::Init, Method::Fda(2), Method::LdaCs]
        );
        assert!(parse_methods(" , ").is_err());
    }

    #[test]
    fn bandwidth_tokens() {
        assert_eq!("gcv".parse::<BandwidthPolicy>().unwrap(), BandwidthPolicy::default());
        assert_eq!("0.1".parse::<BandwidthPolicy>().unwrap(), BandwidthPolicy::Fixed(0.1));
        assert!("-1".parse::<BandwidthPolicy>().is_err());
        assert!("wide".parse::<BandwidthPolicy>().is_err());
    }

    #[test]
    fn init_skips_smoothing_and_fda_reports_fve() {
        let (ds, _) = gen_dataset(Scenario::BrownianMotion, 40, 30, &[1.0, 0.5], 3).unwrap();
        let settings = FitSettings {
            grid_size: 21,
            bandwidth: BandwidthPolicy::Fixed(0.2),
            ..FitSettings::default()
        };
        let init = fit_method(&ds, Method::Init, &settings, None).unwrap();
        assert!(init.fit.is_none() && init.fve.is_none());
        assert_eq!(init.beta_hat, ols_initial(&ds).unwrap());
        let prep = prepare_fda(&ds, &settings).unwrap();
        let fda = fit_method(&ds, Method::Fda(2), &settings, Some(&prep)).unwrap();
        assert_eq!(fda.kappa, Some(2));
        assert_eq!(fda.fve, Some(prep.eigsys.fve_at(2)));
        assert!(fda.sandwich.is_some());
        let fresh = fit_method(&ds, Method::Fda(2), &settings, None).unwrap();
        assert_eq!(fresh.beta_hat, fda.beta_hat);
        let cs = fit_method(&ds, Method::LdaCs, &settings, None).unwrap();
        assert!(cs.sandwich.unwrap().analogue);
        let per_time = FitSettings {
            variance: VarianceMode::PerTime,
            ..settings
        };
        assert!(fit_method(&ds, Method::LdaAr, &per_time, None).unwrap().converged());
    }
}
