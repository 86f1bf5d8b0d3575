//! Dense functional / longitudinal data.
//!
//! A [`FunctionalDataset`] is a collection of subjects, each observed at `m_i`
//! time points on the unit interval with a scalar response and a `p`-vector of
//! covariates at every time. Datasets are immutable once built and can be
//! shared freely between worker threads.
//!
//! ## CSV format
//!
//! Long format, one observation per row, header mandatory:
//!
//! ```text
//! subject_id,time,y,x1,x2,...,xp
//! s01,0.0,1.25,1.0,0.3
//! s01,0.5,0.91,1.0,-0.2
//! ```
//!
//! Rows of one subject need not be contiguous or sorted. If any time falls
//! outside `[0, 1]` every time is mapped affinely onto the unit interval using
//! the global minimum and maximum, and the map is kept in
//! [`FunctionalDataset::time_scaling`].

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("time grid needs at least 2 points, got {0}")]
    GridTooShort(usize),
    #[error("time grid must be strictly increasing inside [0, 1] (violated at index {0})")]
    GridNotIncreasing(usize),
    #[error("header must be `subject_id,time,y,x1,...,xp`: {0}")]
    BadHeader(String),
    #[error("row {row}: {msg}")]
    MalformedRow { row: usize, msg: String },
    #[error("row {row}: expected {expected} columns, found {found}")]
    ColumnCount { row: usize, expected: usize, found: usize },
    #[error("subject `{subject}` has {count} observation(s): insufficient observations (need at least 2)")]
    InsufficientObservations { subject: String, count: usize },
    #[error("invalid sample `{subject}`: {msg}")]
    InvalidSample { subject: String, msg: String },
    #[error("dataset has no samples")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("all observation times are identical; cannot rescale to [0, 1]")]
    DegenerateTimes,
    #[error("coefficient vector contains a non-finite entry")]
    NonFiniteCoefficient,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Ordered evaluation points on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self, DataError> {
        if points.len() < 2 {
            return Err(DataError::GridTooShort(points.len()));
        }
        for (j, &t) in points.iter().enumerate() {
            if !t.is_finite() || !(0.0..=1.0).contains(&t) {
                return Err(DataError::GridNotIncreasing(j));
            }
            if j > 0 && t <= points[j - 1] {
                return Err(DataError::GridNotIncreasing(j));
            }
        }
        Ok(Self { points })
    }

    /// `size` equidistant points `j / (size - 1)`, both endpoints included.
    pub fn uniform(size: usize) -> Result<Self, DataError> {
        if size < 2 {
            return Err(DataError::GridTooShort(size));
        }
        let last = (size - 1) as f64;
        Self::new((0..size).map(|j| j as f64 / last).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Spacing of a uniform grid (first gap).
    pub fn spacing(&self) -> f64 {
        self.points[1] - self.points[0]
    }

    /// True when every gap matches the first one to 1e-9 relative.
    pub fn is_uniform(&self) -> bool {
        let d = self.spacing();
        self.points
            .windows(2)
            .all(|w| ((w[1] - w[0]) - d).abs() <= 1e-9 * d.max(1e-300))
    }
}

/// One subject's trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSample {
    subject_id: String,
    times: Vec<f64>,
    y: DVector<f64>,
    x: DMatrix<f64>,
}

impl FunctionalSample {
    pub fn new(
        subject_id: impl Into<String>,
        times: Vec<f64>,
        y: DVector<f64>,
        x: DMatrix<f64>,
    ) -> Result<Self, DataError> {
        let subject_id = subject_id.into();
        let invalid = |msg: String| DataError::InvalidSample {
            subject: subject_id.clone(),
            msg,
        };
        let m = times.len();
        if m < 2 {
            return Err(DataError::InsufficientObservations {
                subject: subject_id,
                count: m,
            });
        }
        if y.len() != m || x.nrows() != m {
            return Err(invalid(format!(
                "{m} times but {} responses and {} covariate rows",
                y.len(),
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(invalid("no covariates".into()));
        }
        if times.iter().any(|t| !t.is_finite() || !(0.0..=1.0).contains(t)) {
            return Err(invalid("times must lie in [0, 1]".into()));
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("times must be sorted ascending".into()));
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite response or covariate".into()));
        }
        Ok(Self {
            subject_id,
            times,
            y,
            x,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Covariates, `m_i × p`.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of ordered off-diagonal pairs, `m_i (m_i - 1)`.
    pub fn pair_count(&self) -> usize {
        self.len() * (self.len() - 1)
    }
}

/// Affine map applied to raw times: `t' = (t - min) / (max - min)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeScaling {
    pub min: f64,
    pub max: f64,
}

impl TimeScaling {
    pub fn apply(&self, t: f64) -> f64 {
        (t - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    samples: Vec<FunctionalSample>,
    p: usize,
    total_pairs: usize,
    time_scaling: Option<TimeScaling>,
}

impl FunctionalDataset {
    pub fn new(samples: Vec<FunctionalSample>) -> Result<Self, DataError> {
        let first = samples.first().ok_or(DataError::Empty)?;
        let p = first.p();
        for s in &samples {
            if s.p() != p {
                return Err(DataError::DimensionMismatch {
                    expected: p,
                    found: s.p(),
                });
            }
        }
        let total_pairs = samples.iter().map(FunctionalSample::pair_count).sum();
        Ok(Self {
            samples,
            p,
            total_pairs,
            time_scaling: None,
        })
    }

    pub fn with_time_scaling(mut self, scaling: Option<TimeScaling>) -> Self {
        self.time_scaling = scaling;
        self
    }

    pub fn samples(&self) -> &[FunctionalSample] {
        &self.samples
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// `N = Σ m_i (m_i - 1)`.
    pub fn total_pairs(&self) -> usize {
        self.total_pairs
    }

    pub fn total_observations(&self) -> usize {
        self.samples.iter().map(FunctionalSample::len).sum()
    }

    pub fn time_scaling(&self) -> Option<TimeScaling> {
        self.time_scaling
    }

    /// Writes the dataset in the long CSV format, full round-trip precision.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["subject_id".to_string(), "time".into(), "y".into()];
        header.extend((1..=self.p).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(3 + self.p);
        for s in &self.samples {
            for j in 0..s.len() {
                record.clear();
                record.push(s.subject_id.clone());
                record.push(s.times[j].to_string());
                record.push(s.y[j].to_string());
                record.extend((0..self.p).map(|k| s.x[(j, k)].to_string()));
                w.write_record(&record)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Residuals `ê_i = y_i − X_i β` for every subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub residuals: Vec<DVector<f64>>,
    pub beta: DVector<f64>,
}

pub fn residuals(dataset: &FunctionalDataset, beta: &DVector<f64>) -> Result<ResidualSet, DataError> {
    if beta.len() != dataset.p() {
        return Err(DataError::DimensionMismatch {
            expected: dataset.p(),
            found: beta.len(),
        });
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(DataError::NonFiniteCoefficient);
    }
    let residuals = dataset.samples().iter().map(|s| s.y() - s.x() * beta).collect();
    Ok(ResidualSet {
        residuals,
        beta: beta.clone(),
    })
}

struct RawRow {
    time: f64,
    y: f64,
    x: Vec<f64>,
}

fn parse_field(row: usize, name: &str, raw: &str) -> Result<f64, DataError> {
    if raw.is_empty() {
        return Err(DataError::MalformedRow {
            row,
            msg: format!("missing value in `{name}`"),
        });
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(DataError::MalformedRow {
            row,
            msg: format!("non-finite value `{raw}` in `{name}`"),
        }),
        Err(_) => Err(DataError::MalformedRow {
            row,
            msg: format!("cannot parse `{raw}` in `{name}` as a number"),
        }),
    }
}

/// Reads a long-format CSV into a dataset. Rows are numbered from 1,
/// excluding the header.
pub fn load_csv<R: Read>(source: R) -> Result<FunctionalDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let header = reader.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < 4 {
        return Err(DataError::BadHeader(format!(
            "need at least 4 columns, found {}",
            names.len()
        )));
    }
    if names[0] != "subject_id" || names[1] != "time" || names[2] != "y" {
        return Err(DataError::BadHeader(format!(
            "leading columns are `{}`",
            names[..3].join(",")
        )));
    }
    let p = names.len() - 3;
    for (k, name) in names[3..].iter().enumerate() {
        if *name != format!("x{}", k + 1) {
            return Err(DataError::BadHeader(format!(
                "column {} should be `x{}`, found `{name}`",
                k + 4,
                k + 1
            )));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<RawRow>> = HashMap::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| DataError::MalformedRow {
            row,
            msg: e.to_string(),
        })?;
        if record.len() != p + 3 {
            return Err(DataError::ColumnCount {
                row,
                expected: p + 3,
                found: record.len(),
            });
        }
        let subject = record[0].to_string();
        if subject.is_empty() {
            return Err(DataError::MalformedRow {
                row,
                msg: "empty subject_id".into(),
            });
        }
        let time = parse_field(row, "time", &record[1])?;
        let y = parse_field(row, "y", &record[2])?;
        let x = (0..p)
            .map(|k| parse_field(row, names[k + 3], &record[k + 3]))
            .collect::<Result<Vec<_>, _>>()?;
        groups
            .entry(subject.clone())
            .or_insert_with(|| {
                order.push(subject);
                Vec::new()
            })
            .push(RawRow { time, y, x });
    }
    if order.is_empty() {
        return Err(DataError::Empty);
    }

    let (lo, hi) = groups
        .values()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.time), hi.max(r.time))
        });
    let scaling = if lo < 0.0 || hi > 1.0 {
        if hi <= lo {
            return Err(DataError::DegenerateTimes);
        }
        Some(TimeScaling { min: lo, max: hi })
    } else {
        None
    };

    let mut samples = Vec::with_capacity(order.len());
    for subject in order {
        let mut rows = groups.remove(&subject).unwrap_or_default();
        if rows.len() < 2 {
            return Err(DataError::InsufficientObservations {
                subject,
                count: rows.len(),
            });
        }
        // stable: duplicate times keep file order
        rows.sort_by(|a, b| a.time.total_cmp(&b.time));
        let m = rows.len();
        let times = rows
            .iter()
            .map(|r| match scaling {
                Some(sc) => sc.apply(r.time).clamp(0.0, 1.0),
                None => r.time,
            })
            .collect();
        let y = DVector::from_iterator(m, rows.iter().map(|r| r.y));
        let x = DMatrix::from_fn(m, p, |j, k| rows[j].x[k]);
        samples.push(FunctionalSample::new(subject, times, y, x)?);
    }
    Ok(FunctionalDataset::new(samples)?.with_time_scaling(scaling))
}
