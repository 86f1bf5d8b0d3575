//! Monte-Carlo replication runner and report tables.

use std::fmt::Write as _;
use std::io::Read;

use rayon::prelude::*;

use crate::fpca::EigenSystem;
use crate::funcdata::FunctionalDataset;
use crate::pipeline::{fit_method, prepare_fda, FitSettings, Method, MethodFit};
use crate::simgen::{generate, replication_seed, Scenario, SimSpec, SimulatedTruth};
use crate::Error;

/// Coefficients used throughout the simulation study.
pub const DEFAULT_BETA: [f64; 2] = [1.0, 0.5];

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub m: usize,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub beta: Vec<f64>,
    pub settings: FitSettings,
}

impl StudyConfig {
    pub fn new(scenario: Scenario, n: usize, m: usize, replications: usize, methods: Vec<Method>, seed: u64) -> Self {
        Self {
            scenario,
            n,
            m,
            replications,
            methods,
            seed,
            beta: DEFAULT_BETA.to_vec(),
            settings: FitSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.replications == 0 {
            return Err("need at least one replication".into());
        }
        if self.methods.is_empty() {
            return Err("method list is empty".into());
        }
        if self.n == 0 || self.m < 2 {
            return Err(format!("need n >= 1 and m >= 2, got n = {}, m = {}", self.n, self.m));
        }
        if self.beta.is_empty() {
            return Err("beta is empty".into());
        }
        if self.settings.grid_size < 2 {
            return Err("grid needs at least 2 points".into());
        }
        Ok(())
    }

    fn sim_spec(&self) -> SimSpec {
        SimSpec::new(self.scenario, self.n, self.m, self.beta.clone())
    }
}

/// One method on one replication; `Err` carries the failure message.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    pub result: Result<MethodFit, String>,
}

impl MethodOutcome {
    /// The estimate if the fit succeeded and converged.
    pub fn accepted(&self) -> Option<&MethodFit> {
        self.result.as_ref().ok().filter(|f| f.converged())
    }
}

#[derive(Debug, Clone)]
pub struct ReplicationOutcome {
    pub b: usize,
    pub seed: u64,
    pub methods: Vec<MethodOutcome>,
    /// Covariance smoothings plus eigendecompositions performed (0 or 1).
    pub eigen_computations: usize,
}

/// The dataset of replication `b`.
pub fn simulate_replication(config: &StudyConfig, b: usize) -> Result<(FunctionalDataset, SimulatedTruth), Error> {
    Ok(generate(&config.sim_spec(), replication_seed(config.seed, b as u64))?)
}

/// Runs every configured method on `dataset`; FPCA methods share one
/// covariance estimate.
pub fn run_methods(config: &StudyConfig, dataset: &FunctionalDataset) -> (Vec<MethodOutcome>, usize) {
    let needs_fpca = config.methods.iter().any(Method::is_fda);
    let prep = needs_fpca.then(|| prepare_fda(dataset, &config.settings).map_err(|e| e.to_string()));
    let outcomes = config
        .methods
        .iter()
        .map(|&method| {
            let result = match (&prep, method.is_fda()) {
                (Some(Err(e)), true) => Err(format!("covariance estimation failed: {e}")),
                (Some(Ok(p)), true) => {
                    fit_method(dataset, method, &config.settings, Some(p)).map_err(|e| e.to_string())
                }
                _ => fit_method(dataset, method, &config.settings, None).map_err(|e| e.to_string()),
            };
            MethodOutcome { method, result }
        })
        .collect();
    (outcomes, usize::from(needs_fpca))
}

pub fn run_replication(config: &StudyConfig, b: usize) -> Result<ReplicationOutcome, Error> {
    let (dataset, _) = simulate_replication(config, b)?;
    let (methods, eigen_computations) = run_methods(config, &dataset);
    Ok(ReplicationOutcome {
        b,
        seed: replication_seed(config.seed, b as u64),
        methods,
        eigen_computations,
    })
}

/// Runs all replications in parallel, returned in replication order.
pub fn run_replications(config: &StudyConfig) -> Result<Vec<ReplicationOutcome>, Error> {
    (0..config.replications)
        .into_par_iter()
        .map(|b| run_replication(config, b))
        .collect()
}

pub fn run_study(config: &StudyConfig) -> Result<Report, Error> {
    Ok(aggregate(config, &run_replications(config)?))
}

/// Summary of one coefficient under one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    /// 1-based.
    pub coefficient: usize,
    pub mean: Option<f64>,
    /// Sample SD with the `B - 1` divisor; `None` for fewer than two estimates.
    pub sd: Option<f64>,
    pub ab: Option<f64>,
    pub mse_x100: Option<f64>,
    /// Mean cumulative FVE at the method's κ, in percent.
    pub fve_pct: Option<f64>,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub scenario: String,
    pub n: usize,
    pub m: usize,
    pub replications: usize,
    pub beta: Vec<f64>,
    pub rows: Vec<MetricsRow>,
}

impl Report {
    pub fn rows_for(&self, method: &str) -> Vec<&MetricsRow> {
        self.rows.iter().filter(|r| r.method == method).collect()
    }

    pub fn row(&self, method: &str, coefficient: usize) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.coefficient == coefficient)
    }

    /// Methods with no accepted replication.
    pub fn empty_methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .rows
            .iter()
            .filter(|r| r.successes == 0)
            .map(|r| r.method.as_str())
            .collect();
        out.dedup();
        out
    }
}

/// Aggregates accepted estimates; non-convergent and failed fits are counted
/// in `failures` and left out.
pub fn aggregate(config: &StudyConfig, outcomes: &[ReplicationOutcome]) -> Report {
    let mut rows = Vec::new();
    for (slot, method) in config.methods.iter().enumerate() {
        let accepted: Vec<&MethodFit> = outcomes.iter().filter_map(|o| o.methods[slot].accepted()).collect();
        let successes = accepted.len();
        let failures = outcomes.len() - successes;
        let fve_pct = if method.is_fda() && successes > 0 {
            Some(100.0 * accepted.iter().filter_map(|f| f.fve).sum::<f64>() / successes as f64)
        } else {
            None
        };
        for (c, &truth) in config.beta.iter().enumerate() {
            let est: Vec<f64> = accepted.iter().map(|f| f.beta_hat[c]).collect();
            let k = est.len() as f64;
            let mean = (!est.is_empty()).then(|| est.iter().sum::<f64>() / k);
            let sd = mean
                .filter(|_| est.len() > 1)
                .map(|mu| (est.iter().map(|e| (e - mu).powi(2)).sum::<f64>() / (k - 1.0)).sqrt());
            let ab = mean.map(|_| est.iter().map(|e| (e - truth).abs()).sum::<f64>() / k);
            let mse_x100 = mean.map(|_| 100.0 * est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / k);
            rows.push(MetricsRow {
                method: method.to_string(),
                coefficient: c + 1,
                mean,
                sd,
                ab,
                mse_x100,
                fve_pct,
                successes,
                failures,
            });
        }
    }
    Report {
        scenario: config.scenario.to_string(),
        n: config.n,
        m: config.m,
        replications: config.replications,
        beta: config.beta.clone(),
        rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

fn method_order(report: &Report) -> Vec<&str> {
    let mut seen: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !seen.contains(&r.method.as_str()) {
            seen.push(&r.method);
        }
    }
    seen
}

/// One line per method: Mean/SD/AB/MSE(×100) per coefficient, then FVE %.
pub fn emit_report(report: &Report, format: ReportFormat) -> String {
    let p = report.beta.len();
    let mut head = vec!["method".to_string()];
    for c in 1..=p {
        for stat in ["mean", "sd", "ab", "mse"] {
            head.push(format!("beta{c}_{stat}"));
        }
    }
    head.extend(["fve_pct", "successes", "failures"].map(String::from));

    let lines: Vec<Vec<String>> = method_order(report)
        .into_iter()
        .map(|method| {
            let rows = report.rows_for(method);
            let mut line = vec![method.to_string()];
            for c in 1..=p {
                match rows.iter().find(|r| r.coefficient == c) {
                    Some(r) => line.extend([r.mean, r.sd, r.ab, r.mse_x100].map(cell)),
                    None => line.extend(std::iter::repeat_n("NA".to_string(), 4)),
                }
            }
            let first = rows.first();
            line.push(cell(first.and_then(|r| r.fve_pct)));
            line.push(first.map_or(0, |r| r.successes).to_string());
            line.push(first.map_or(0, |r| r.failures).to_string());
            line
        })
        .collect();

    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&head.join(","));
            out.push('\n');
            for line in lines {
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            let _ = writeln!(
                out,
                "Scenario {}, n = {}, m = {}, {} replications. MSE is scaled by 100; FVE is in percent.\n",
                report.scenario, report.n, report.m, report.replications
            );
            let mut md_head = vec!["Method".to_string()];
            for c in 1..=p {
                for stat in ["Mean", "SD", "AB", "MSE"] {
                    md_head.push(format!("β{c} {stat}"));
                }
            }
            md_head.extend(["FVE %", "ok", "failed"].map(String::from));
            let _ = writeln!(out, "| {} |", md_head.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(md_head.len()));
            for mut line in lines {
                // FVE is blank for the non-FPCA methods, as in the usual table layout
                let fve = line.len() - 3;
                if line[fve] == "NA" {
                    line[fve] = String::new();
                }
                let _ = writeln!(out, "| {} |", line.join(" | "));
            }
        }
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum ReportParseError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("bad report header: {0}")]
    Header(String),
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
}

/// A method line of a CSV report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub method: String,
    /// `[mean, sd, ab, mse_x100]` per coefficient.
    pub coefficients: Vec<[Option<f64>; 4]>,
    pub fve_pct: Option<f64>,
    pub successes: usize,
    pub failures: usize,
}

/// Reads back a report written by [`emit_report`] in CSV form.
pub fn parse_report_csv<R: Read>(source: R) -> Result<Vec<ReportLine>, ReportParseError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let header = reader.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let width = cols.len();
    if width < 5
        || !(width - 4).is_multiple_of(4)
        || cols[0] != "method"
        || cols[width - 3..] != ["fve_pct", "successes", "failures"]
    {
        return Err(ReportParseError::Header(cols.join(",")));
    }
    let p = (width - 4) / 4;
    for c in 0..p {
        for (s, stat) in ["mean", "sd", "ab", "mse"].iter().enumerate() {
            if cols[1 + 4 * c + s] != format!("beta{}_{stat}", c + 1) {
                return Err(ReportParseError::Header(cols.join(",")));
            }
        }
    }
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        let err = |msg: String| ReportParseError::Row { row, msg };
        if record.len() != width {
            return Err(err(format!("expected {width} fields, found {}", record.len())));
        }
        let num = |i: usize| -> Result<Option<f64>, ReportParseError> {
            let s = record[i].trim();
            if s == "NA" {
                return Ok(None);
            }
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| err(format!("field {} is not a number: '{s}'", i + 1)))
        };
        let count = |i: usize| -> Result<usize, ReportParseError> {
            record[i]
                .trim()
                .parse()
                .map_err(|_| err(format!("field {} is not a count", i + 1)))
        };
        let coefficients = (0..p)
            .map(|c| Ok([num(1 + 4 * c)?, num(2 + 4 * c)?, num(3 + 4 * c)?, num(4 + 4 * c)?]))
            .collect::<Result<Vec<_>, ReportParseError>>()?;
        out.push(ReportLine {
            method: record[0].to_string(),
            coefficients,
            fve_pct: num(width - 3)?,
            successes: count(width - 2)?,
            failures: count(width - 1)?,
        });
    }
    Ok(out)
}

/// Eigenvalues and cumulative FVE per retained component, as CSV.
pub fn emit_fve_scree(eigsys: &EigenSystem) -> String {
    let mut out = String::from("k,lambda,fve\n");
    for k in 0..eigsys.retained() {
        let _ = writeln!(out, "{},{},{}", k + 1, eigsys.eigenvalues()[k], eigsys.fve()[k]);
    }
    out
}
