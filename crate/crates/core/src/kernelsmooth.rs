//! Local linear smoothing of the raw residual covariance surface.
//!
//! Every ordered pair `j1 != j2` of a subject's residuals yields a raw
//! covariance observation `c = e(T_j1) e(T_j2)` located at `(T_j1, T_j2)`.
//! Diagonal pairs are never used, which keeps the estimate free of any
//! measurement-error nugget on the diagonal.
//!
//! Pairs that share a location are pooled into cells holding their summed
//! weight and weighted first and second moments of `c`. The local linear fit
//! and the GCV criterion only need those sums, so dense designs with a common
//! time grid reduce from `N = Σ m_i (m_i - 1)` pairs to at most `U²` cells,
//! `U` being the number of distinct observation times.

use std::collections::HashMap;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::funcdata::{FunctionalDataset, ResidualSet, TimeGrid};

/// Number of bandwidth doublings tried at a grid cell whose local system is singular.
pub const MAX_BANDWIDTH_DOUBLINGS: usize = 3;

/// Default candidate bandwidths for GCV.
pub const DEFAULT_BANDWIDTHS: [f64; 7] = [0.05, 0.075, 0.10, 0.15, 0.20, 0.25, 0.30];

/// Default number of points in the evaluation grid.
pub const DEFAULT_GRID_SIZE: usize = 51;

const SINGULAR_TOLERANCE: f64 = 1e-10;
const DENSE_CELL_LIMIT: usize = 1 << 18;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothError {
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("bandwidth {bandwidth} does not exceed the grid spacing {spacing}")]
    BandwidthBelowSpacing { bandwidth: f64, spacing: f64 },
    #[error("evaluation grid must be uniform")]
    NonUniformGrid,
    #[error("no candidate bandwidths supplied")]
    NoCandidates,
    #[error("local linear system is singular at (s={s}, t={t}) with bandwidth {bandwidth}")]
    Singular { s: f64, t: f64, bandwidth: f64 },
    #[error("every candidate bandwidth gives an effective trace of at least N (too few pairs)")]
    DegenerateGcv,
}

/// Epanechnikov kernel `0.75 (1 - u²)` on `[-1, 1]`.
pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelKind {
    #[default]
    Epanechnikov,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn epanechnikov(bandwidth: f64) -> Result<Self, SmoothError> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(SmoothError::InvalidBandwidth(bandwidth));
        }
        Ok(Self {
            kind: KernelKind::Epanechnikov,
            bandwidth,
        })
    }

    /// Standard kernel `K(u)`.
    pub fn profile(&self, u: f64) -> f64 {
        match self.kind {
            KernelKind::Epanechnikov => epanechnikov(u),
        }
    }

    /// Rescaled kernel `K_h(u) = K(u/h) / h`.
    pub fn scaled(&self, u: f64) -> f64 {
        self.profile(u / self.bandwidth) / self.bandwidth
    }

    fn widened(&self, factor: f64) -> Self {
        Self {
            kind: self.kind,
            bandwidth: self.bandwidth * factor,
        }
    }
}

/// How each raw pair is weighted in the smoother objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairWeighting {
    /// `1 / N` for every pair.
    PerPair,
    /// `1 / (n N_i)`, every subject contributing equally.
    #[default]
    PerSubject,
}

/// One raw covariance observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovPair {
    pub subject: usize,
    pub s: f64,
    pub t: f64,
    pub c: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct CellMoments {
    weight: f64,
    wc: f64,
    wcc: f64,
    count: usize,
}

impl CellMoments {
    fn add(&mut self, w: f64, c: f64) {
        self.weight += w;
        self.wc += w * c;
        self.wcc += w * c * c;
        self.count += 1;
    }
}

/// All off-diagonal residual products, pooled by location.
#[derive(Debug, Clone)]
pub struct RawCovPairs {
    times: Vec<Vec<f64>>,
    residuals: Vec<Vec<f64>>,
    weighting: PairWeighting,
    len: usize,
    unique_times: Vec<f64>,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    cells: Vec<CellMoments>,
}

/// Builds the raw covariance pairs from residuals evaluated on `dataset`.
///
/// Panics if `residuals` was not computed from `dataset` (length mismatch).
pub fn raw_cov_pairs(dataset: &FunctionalDataset, residuals: &ResidualSet, weighting: PairWeighting) -> RawCovPairs {
    let times: Vec<Vec<f64>> = dataset.samples().iter().map(|s| s.times().to_vec()).collect();
    let resid: Vec<Vec<f64>> = residuals.residuals.iter().map(|r| r.as_slice().to_vec()).collect();
    RawCovPairs::new(times, resid, weighting)
}

impl RawCovPairs {
    /// `times[i]` and `residuals[i]` are one subject's observation times and
    /// residuals; every subject needs at least two observations.
    pub fn new(times: Vec<Vec<f64>>, residuals: Vec<Vec<f64>>, weighting: PairWeighting) -> Self {
        assert_eq!(times.len(), residuals.len(), "one residual vector per subject");
        for (t, r) in times.iter().zip(&residuals) {
            assert_eq!(t.len(), r.len(), "residual length must match m_i");
            assert!(t.len() >= 2, "every subject needs m_i >= 2");
        }
        let n = times.len();
        let len: usize = times.iter().map(|t| t.len() * (t.len() - 1)).sum();

        let mut unique: Vec<f64> = times.iter().flatten().copied().collect();
        unique.sort_by(f64::total_cmp);
        unique.dedup();
        let u = unique.len();
        let index = |t: f64| unique.partition_point(|&x| x < t);

        let weight_of = |m: usize| -> f64 {
            match weighting {
                PairWeighting::PerPair => 1.0 / len as f64,
                PairWeighting::PerSubject => 1.0 / (n as f64 * (m * (m - 1)) as f64),
            }
        };

        let mut row_start = vec![0usize; u + 1];
        let mut cols = Vec::new();
        let mut cells = Vec::new();
        if u * u <= DENSE_CELL_LIMIT {
            let mut dense = vec![CellMoments::default(); u * u];
            for (t, e) in times.iter().zip(&residuals) {
                let w = weight_of(t.len());
                let idx: Vec<usize> = t.iter().map(|&x| index(x)).collect();
                for j1 in 0..t.len() {
                    for j2 in 0..t.len() {
                        if j1 != j2 {
                            dense[idx[j1] * u + idx[j2]].add(w, e[j1] * e[j2]);
                        }
                    }
                }
            }
            for a in 0..u {
                for b in 0..u {
                    let cell = dense[a * u + b];
                    if cell.count > 0 {
                        cols.push(b as u32);
                        cells.push(cell);
                    }
                }
                row_start[a + 1] = cols.len();
            }
        } else {
            let mut sparse: HashMap<(u32, u32), CellMoments> = HashMap::new();
            for (t, e) in times.iter().zip(&residuals) {
                let w = weight_of(t.len());
                let idx: Vec<u32> = t.iter().map(|&x| index(x) as u32).collect();
                for j1 in 0..t.len() {
                    for j2 in 0..t.len() {
                        if j1 != j2 {
                            sparse.entry((idx[j1], idx[j2])).or_default().add(w, e[j1] * e[j2]);
                        }
                    }
                }
            }
            let mut entries: Vec<_> = sparse.into_iter().collect();
            entries.sort_by_key(|(k, _)| *k);
            for ((a, b), cell) in entries {
                cols.push(b);
                cells.push(cell);
                row_start[a as usize + 1] = cols.len();
            }
            for a in 1..=u {
                row_start[a] = row_start[a].max(row_start[a - 1]);
            }
        }

        Self {
            times,
            residuals,
            weighting,
            len,
            unique_times: unique,
            row_start,
            cols,
            cells,
        }
    }

    /// Number of raw pairs `N`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn weighting(&self) -> PairWeighting {
        self.weighting
    }

    pub fn subject_count(&self) -> usize {
        self.times.len()
    }

    /// Number of distinct pair locations.
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Every raw pair in subject order, then `(j1, j2)` lexicographic.
    pub fn iter(&self) -> impl Iterator<Item = CovPair> + '_ {
        let n = self.times.len();
        let total = self.len;
        let weighting = self.weighting;
        self.times
            .iter()
            .zip(&self.residuals)
            .enumerate()
            .flat_map(move |(i, (t, e))| {
                let m = t.len();
                let weight = match weighting {
                    PairWeighting::PerPair => 1.0 / total as f64,
                    PairWeighting::PerSubject => 1.0 / (n as f64 * (m * (m - 1)) as f64),
                };
                (0..m).flat_map(move |j1| {
                    (0..m).filter(move |&j2| j2 != j1).map(move |j2| CovPair {
                        subject: i,
                        s: t[j1],
                        t: t[j2],
                        c: e[j1] * e[j2],
                        weight,
                    })
                })
            })
    }

    fn cells_with_location(&self) -> impl Iterator<Item = (f64, f64, &CellMoments)> + '_ {
        (0..self.unique_times.len()).flat_map(move |a| {
            (self.row_start[a]..self.row_start[a + 1]).map(move |k| {
                (
                    self.unique_times[a],
                    self.unique_times[self.cols[k] as usize],
                    &self.cells[k],
                )
            })
        })
    }

    /// Weighted normal equations of the local plane fit at `(s, t)`, in the
    /// standardized design `(1, (s' - s)/h, (t' - t)/h)`.
    fn local_system(&self, s: f64, t: f64, kernel: &KernelSpec) -> (Matrix3<f64>, Vector3<f64>) {
        let h = kernel.bandwidth;
        let times = &self.unique_times;
        let lo = times.partition_point(|&x| x < s - h);
        let hi = times.partition_point(|&x| x <= s + h);
        let mut lhs = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        for a in lo..hi {
            let ks = kernel.scaled(times[a] - s);
            if ks == 0.0 {
                continue;
            }
            let row = &self.cols[self.row_start[a]..self.row_start[a + 1]];
            let first = row.partition_point(|&b| times[b as usize] < t - h);
            let last = row.partition_point(|&b| times[b as usize] <= t + h);
            let du = (times[a] - s) / h;
            for (offset, &b) in row[first..last].iter().enumerate() {
                let kt = kernel.scaled(times[b as usize] - t);
                if kt == 0.0 {
                    continue;
                }
                let cell = &self.cells[self.row_start[a] + first + offset];
                let kk = ks * kt;
                let z = Vector3::new(1.0, du, (times[b as usize] - t) / h);
                lhs += (kk * cell.weight) * z * z.transpose();
                rhs += (kk * cell.wc) * z;
            }
        }
        (lhs, rhs)
    }

    /// Returns `(â0, [S⁻¹]₀₀)` of the local fit, or `None` when singular.
    fn local_fit(&self, s: f64, t: f64, kernel: &KernelSpec) -> Option<(f64, f64)> {
        let (lhs, rhs) = self.local_system(s, t, kernel);
        let total = lhs[(0, 0)];
        if !(total > 0.0) || !total.is_finite() {
            return None;
        }
        let normalized = lhs / total;
        let eig = SymmetricEigen::new(normalized);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > SINGULAR_TOLERANCE * max) {
            return None;
        }
        let chol = normalized.cholesky()?;
        let coef = chol.solve(&(rhs / total));
        let inv00 = chol.inverse()[(0, 0)] / total;
        coef[0].is_finite().then_some((coef[0], inv00))
    }

    /// Local fit with the bandwidth doubled up to [`MAX_BANDWIDTH_DOUBLINGS`] times.
    fn local_fit_widening(
        &self,
        s: f64,
        t: f64,
        kernel: &KernelSpec,
    ) -> Result<(f64, f64, KernelSpec, bool), SmoothError> {
        let mut k = *kernel;
        for attempt in 0..=MAX_BANDWIDTH_DOUBLINGS {
            if let Some((a0, inv00)) = self.local_fit(s, t, &k) {
                return Ok((a0, inv00, k, attempt > 0));
            }
            k = k.widened(2.0);
        }
        Err(SmoothError::Singular {
            s,
            t,
            bandwidth: kernel.bandwidth,
        })
    }
}

/// Local linear estimate `R̂(s, t) = â0`.
pub fn local_linear_cov_at(pairs: &RawCovPairs, s: f64, t: f64, kernel: &KernelSpec) -> Result<f64, SmoothError> {
    pairs
        .local_fit(s, t, kernel)
        .map(|(a0, _)| a0)
        .ok_or(SmoothError::Singular {
            s,
            t,
            bandwidth: kernel.bandwidth,
        })
}

/// Covariance surface on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedCovariance {
    pub grid: TimeGrid,
    /// `values[(a, b)] = R̂(grid[a], grid[b])`.
    pub values: DMatrix<f64>,
    pub bandwidth: f64,
    pub pair_count: usize,
    /// Grid cells that needed a widened bandwidth.
    pub widened_cells: usize,
}

impl SmoothedCovariance {
    /// Bilinear interpolation of the grid surface; arguments are clamped to `[0, 1]`.
    pub fn interpolate(&self, s: f64, t: f64) -> f64 {
        let pts = self.grid.points();
        let locate = |x: f64| -> (usize, f64) {
            let g = pts.len();
            let x = x.clamp(pts[0], pts[g - 1]);
            let j = pts.partition_point(|&p| p <= x).clamp(1, g - 1) - 1;
            (j, (x - pts[j]) / (pts[j + 1] - pts[j]))
        };
        let (a, fs) = locate(s);
        let (b, ft) = locate(t);
        let v = &self.values;
        (1.0 - fs) * (1.0 - ft) * v[(a, b)]
            + fs * (1.0 - ft) * v[(a + 1, b)]
            + (1.0 - fs) * ft * v[(a, b + 1)]
            + fs * ft * v[(a + 1, b + 1)]
    }

    /// CSV rows `s,t,value` over the full grid.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["s", "t", "value"])?;
        let pts = self.grid.points();
        for (a, s) in pts.iter().enumerate() {
            for (b, t) in pts.iter().enumerate() {
                w.write_record([s.to_string(), t.to_string(), self.values[(a, b)].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_grid(grid: &TimeGrid, kernel: &KernelSpec) -> Result<(), SmoothError> {
    if !grid.is_uniform() {
        return Err(SmoothError::NonUniformGrid);
    }
    if !(kernel.bandwidth > 0.0 && kernel.bandwidth.is_finite()) {
        return Err(SmoothError::InvalidBandwidth(kernel.bandwidth));
    }
    if kernel.bandwidth <= grid.spacing() {
        return Err(SmoothError::BandwidthBelowSpacing {
            bandwidth: kernel.bandwidth,
            spacing: grid.spacing(),
        });
    }
    Ok(())
}

/// Evaluates the local linear estimate over the full grid, then symmetrizes.
pub fn smooth_cov_surface(
    pairs: &RawCovPairs,
    grid: &TimeGrid,
    kernel: &KernelSpec,
) -> Result<SmoothedCovariance, SmoothError> {
    check_grid(grid, kernel)?;
    let pts = grid.points();
    let g = pts.len();
    let rows: Vec<(Vec<f64>, usize)> = (0..g)
        .into_par_iter()
        .map(|a| {
            let mut row = Vec::with_capacity(g);
            let mut widened = 0;
            for &t in pts {
                let (a0, _, _, w) = pairs.local_fit_widening(pts[a], t, kernel)?;
                widened += usize::from(w);
                row.push(a0);
            }
            Ok((row, widened))
        })
        .collect::<Result<_, SmoothError>>()?;
    let raw = DMatrix::from_fn(g, g, |a, b| rows[a].0[b]);
    let values = DMatrix::from_fn(g, g, |a, b| 0.5 * (raw[(a, b)] + raw[(b, a)]));
    Ok(SmoothedCovariance {
        grid: grid.clone(),
        values,
        bandwidth: kernel.bandwidth,
        pair_count: pairs.len(),
        widened_cells: rows.iter().map(|r| r.1).sum(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcvScore {
    pub bandwidth: f64,
    pub rss: f64,
    /// Sum of the pairs' self-influence in their own local fits.
    pub trace: f64,
    /// `None` when smoothing failed or the trace reached `N`.
    pub gcv: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GcvSelection {
    pub bandwidth: f64,
    pub scores: Vec<GcvScore>,
    /// Surface smoothed at the selected bandwidth.
    pub surface: SmoothedCovariance,
}

fn gcv_score(pairs: &RawCovPairs, surface: &SmoothedCovariance, kernel: &KernelSpec) -> Result<GcvScore, SmoothError> {
    let located: Vec<(f64, f64, &CellMoments)> = pairs.cells_with_location().collect();
    let (rss, trace) = located
        .par_iter()
        .map(|&(s, t, cell)| {
            let f = surface.interpolate(s, t);
            let rss = cell.wcc - 2.0 * f * cell.wc + f * f * cell.weight;
            let (_, inv00, used, _) = pairs.local_fit_widening(s, t, kernel)?;
            let k0 = used.scaled(0.0);
            Ok((rss, cell.weight * k0 * k0 * inv00))
        })
        .collect::<Result<Vec<(f64, f64)>, SmoothError>>()?
        .into_iter()
        .fold((0.0, 0.0), |acc, (r, t)| (acc.0 + r, acc.1 + t));
    let n = pairs.len() as f64;
    let gcv = (trace < n).then(|| rss.max(0.0) / (1.0 - trace / n).powi(2));
    Ok(GcvScore {
        bandwidth: kernel.bandwidth,
        rss,
        trace,
        gcv,
    })
}

/// Index of the smallest GCV score, ties broken toward the larger bandwidth.
fn gcv_argmin(scores: &[GcvScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, sc) in scores.iter().enumerate() {
        let Some(g) = sc.gcv else { continue };
        let better = match best.and_then(|b| scores[b].gcv.map(|bg| (bg, scores[b].bandwidth))) {
            None => true,
            Some((bg, bh)) => g < bg || (g == bg && sc.bandwidth > bh),
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Picks the candidate bandwidth minimizing `RSS(h) / (1 - tr(h)/N)²`;
/// ties go to the larger bandwidth. A single candidate is returned as is.
pub fn select_bandwidth_gcv(
    pairs: &RawCovPairs,
    grid: &TimeGrid,
    candidates: &[f64],
) -> Result<GcvSelection, SmoothError> {
    match candidates {
        [] => return Err(SmoothError::NoCandidates),
        [h] => {
            let kernel = KernelSpec::epanechnikov(*h)?;
            let surface = smooth_cov_surface(pairs, grid, &kernel)?;
            let score = gcv_score(pairs, &surface, &kernel).unwrap_or(GcvScore {
                bandwidth: *h,
                rss: f64::NAN,
                trace: f64::NAN,
                gcv: None,
            });
            return Ok(GcvSelection {
                bandwidth: *h,
                scores: vec![score],
                surface,
            });
        }
        _ => {}
    }
    for &h in candidates {
        check_grid(grid, &KernelSpec::epanechnikov(h)?)?;
    }
    let mut scores = Vec::with_capacity(candidates.len());
    let mut surfaces = Vec::with_capacity(candidates.len());
    for &h in candidates {
        let kernel = KernelSpec::epanechnikov(h)?;
        let scored = smooth_cov_surface(pairs, grid, &kernel)
            .and_then(|surface| gcv_score(pairs, &surface, &kernel).map(|sc| (surface, sc)));
        match scored {
            Ok((surface, score)) => {
                scores.push(score);
                surfaces.push(Some(surface));
            }
            Err(_) => {
                scores.push(GcvScore {
                    bandwidth: h,
                    rss: f64::NAN,
                    trace: f64::NAN,
                    gcv: None,
                });
                surfaces.push(None);
            }
        }
    }
    let best = gcv_argmin(&scores).ok_or(SmoothError::DegenerateGcv)?;
    let bandwidth = scores[best].bandwidth;
    let surface = surfaces.swap_remove(best).ok_or(SmoothError::DegenerateGcv)?;
    Ok(GcvSelection {
        bandwidth,
        scores,
        surface,
    })
}
