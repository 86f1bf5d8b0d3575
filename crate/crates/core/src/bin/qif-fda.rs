use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qif_fda::fpca::Quadrature;
use qif_fda::funcdata::{load_csv, FunctionalDataset};
use qif_fda::harness::{
    aggregate, emit_fve_scree, emit_report, run_methods, simulate_replication, ReplicationOutcome, ReportFormat,
    StudyConfig,
};
use qif_fda::kernelsmooth::PairWeighting;
use qif_fda::pipeline::{fit_method, parse_methods, prepare_fda, BandwidthPolicy, FitSettings, Method, VarianceMode};
use qif_fda::qif::{FitResult, Termination};
use qif_fda::simgen::{replication_seed, Scenario};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_EMPTY_METHOD: u8 = 3;

#[derive(Parser)]
#[command(
    name = "qif-fda",
    version,
    about = "QIF estimation with FPCA-derived working correlation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct SmoothArgs {
    /// Covariance smoothing bandwidth, or `gcv` to select one.
    #[arg(long, default_value = "gcv")]
    bandwidth: BandwidthPolicy,
    /// Points in the covariance grid.
    #[arg(long, default_value_t = 51)]
    grid: usize,
    #[arg(long, value_enum, default_value_t = Weighting::PerSubject)]
    weighting: Weighting,
    #[arg(long, value_enum, default_value_t = QuadratureArg::Trapezoid)]
    quadrature: QuadratureArg,
}

#[derive(clap::Args, Clone)]
struct OptimArgs {
    /// Marginal variance used by the CS/AR1 bases.
    #[arg(long, value_enum, default_value_t = VarianceArg::Identity)]
    variance: VarianceArg,
    #[arg(long, default_value_t = 1e-10)]
    epsilon0: f64,
    #[arg(long, default_value_t = 500)]
    max_count: usize,
    #[arg(long, default_value_t = 50)]
    max_halvings: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo study on simulated data.
    Simulate {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        m: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        /// Comma-separated: init, ldaCS, ldaAR, fda-<k>, fda-auto[:<fve>].
        #[arg(long, default_value = "init,ldaAR,ldaCS,fda-1,fda-2,fda-3,fda-4,fda-5")]
        methods: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        smooth: SmoothArgs,
        #[command(flatten)]
        optim: OptimArgs,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        /// Write every replication's dataset into this directory.
        #[arg(long)]
        emit_data: Option<PathBuf>,
        /// Write per-replication estimates and standard errors as CSV.
        #[arg(long)]
        estimates: Option<PathBuf>,
        /// Allow scenario parameters outside the standard sets.
        #[arg(long)]
        unsafe_params: bool,
    },
    /// Fit one method to a long-format CSV dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Fda)]
        method: MethodArg,
        /// Number of eigenfunctions, or `auto` to choose by FVE.
        #[arg(long, default_value = "auto")]
        kappa: String,
        /// FVE threshold used with `--kappa auto`.
        #[arg(long, default_value_t = 0.95)]
        fve: f64,
        #[command(flatten)]
        smooth: SmoothArgs,
        #[command(flatten)]
        optim: OptimArgs,
        /// Estimates CSV; diagnostics go to the same path with a `.json` extension.
        #[arg(long)]
        out: PathBuf,
        /// Write Â and B̂ of the sandwich variance as JSON.
        #[arg(long)]
        dump_sandwich: Option<PathBuf>,
    },
    /// Smoothed covariance eigendecomposition of a dataset's OLS residuals.
    Fpca {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        smooth: SmoothArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the smoothed surface as `s,t,value` rows.
        #[arg(long)]
        surface: Option<PathBuf>,
        /// Also write a `k,lambda,fve` scree table.
        #[arg(long)]
        scree: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Fda,
    Cs,
    Ar1,
    Init,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weighting {
    PerSubject,
    PerPair,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuadratureArg {
    Trapezoid,
    Rectangle,
}

#[derive(Clone, Copy, ValueEnum)]
enum VarianceArg {
    Identity,
    PerTime,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Md,
}

/// Error with the exit code it maps to.
struct Failure(u8, String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(EXIT_FAILURE, e.to_string())
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure(EXIT_CONFIG, msg.into())
}

fn settings(smooth: &SmoothArgs, optim: &OptimArgs) -> Result<FitSettings, Failure> {
    if smooth.grid < 2 {
        return Err(config_error("--grid must be at least 2"));
    }
    if optim.epsilon0.is_nan() || optim.epsilon0 <= 0.0 || optim.max_count == 0 {
        return Err(config_error("--epsilon0 must be positive and --max-count at least 1"));
    }
    Ok(FitSettings {
        grid_size: smooth.grid,
        bandwidth: smooth.bandwidth.clone(),
        weighting: match smooth.weighting {
            Weighting::PerSubject => PairWeighting::PerSubject,
            Weighting::PerPair => PairWeighting::PerPair,
        },
        quadrature: match smooth.quadrature {
            QuadratureArg::Trapezoid => Quadrature::Trapezoid,
            QuadratureArg::Rectangle => Quadrature::Rectangle,
        },
        variance: match optim.variance {
            VarianceArg::Identity => VarianceMode::Identity,
            VarianceArg::PerTime => VarianceMode::PerTime,
        },
        epsilon0: optim.epsilon0,
        max_count: optim.max_count,
        max_halvings: optim.max_halvings,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure(EXIT_FAILURE, format!("cannot write {}: {e}", path.display())))
}

fn load(path: &Path) -> Result<FunctionalDataset, Failure> {
    let file = File::open(path).map_err(|e| config_error(format!("cannot open {}: {e}", path.display())))?;
    load_csv(file).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    scenario: &str,
    n: usize,
    m: usize,
    reps: usize,
    methods: &str,
    seed: u64,
    settings: FitSettings,
    out: Option<&Path>,
    format: FormatArg,
    emit_data: Option<&Path>,
    estimates: Option<&Path>,
    unsafe_params: bool,
) -> Result<(), Failure> {
    let scenario = Scenario::parse_with(scenario, unsafe_params).map_err(|e| config_error(e.to_string()))?;
    let methods = parse_methods(methods).map_err(config_error)?;
    let mut config = StudyConfig::new(scenario, n, m, reps, methods, seed);
    config.settings = settings;
    config.validate().map_err(config_error)?;
    if let Some(dir) = emit_data {
        fs::create_dir_all(dir)?;
    }

    let outcomes: Vec<ReplicationOutcome> = {
        use rayon::prelude::*;
        (0..reps)
            .into_par_iter()
            .map(|b| -> Result<ReplicationOutcome, Failure> {
                let (dataset, _) = simulate_replication(&config, b)?;
                if let Some(dir) = emit_data {
                    dataset.write_csv(create(&dir.join(format!("rep_{b:04}.csv")))?)?;
                }
                let (methods, eigen_computations) = run_methods(&config, &dataset);
                Ok(ReplicationOutcome {
                    b,
                    seed: replication_seed(seed, b as u64),
                    methods,
                    eigen_computations,
                })
            })
            .collect::<Result<_, _>>()?
    };
    for o in &outcomes {
        for mo in &o.methods {
            if let Err(e) = &mo.result {
                log::warn!("replication {}: {}: {e}", o.b, mo.method);
            }
        }
    }

    let report = aggregate(&config, &outcomes);
    let text = emit_report(
        &report,
        match format {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Md => ReportFormat::Markdown,
        },
    );
    match out {
        Some(path) => create(path)?.write_all(text.as_bytes())?,
        None => print!("{text}"),
    }
    if let Some(path) = estimates {
        write_estimates(path, &outcomes)?;
    }

    let empty = report.empty_methods();
    if !empty.is_empty() {
        return Err(Failure(
            EXIT_EMPTY_METHOD,
            format!("no successful replication for: {}", empty.join(", ")),
        ));
    }
    Ok(())
}

fn write_estimates(path: &Path, outcomes: &[ReplicationOutcome]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "replication",
        "method",
        "coefficient",
        "estimate",
        "std_error",
        "converged",
        "kappa",
        "fve",
    ])?;
    for o in outcomes {
        for mo in &o.methods {
            let Ok(fit) = &mo.result else { continue };
            for (c, est) in fit.beta_hat.iter().enumerate() {
                let se = fit
                    .sandwich
                    .as_ref()
                    .map_or("NA".to_string(), |s| s.std_errors[c].to_string());
                w.write_record([
                    o.b.to_string(),
                    mo.method.to_string(),
                    (c + 1).to_string(),
                    est.to_string(),
                    se,
                    fit.converged().to_string(),
                    fit.kappa.map_or("NA".into(), |k| k.to_string()),
                    fit.fve.map_or("NA".into(), |f| f.to_string()),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct FitSidecar<'a> {
    method: String,
    n: usize,
    p: usize,
    kappa: Option<usize>,
    fve: Option<f64>,
    bandwidth: Option<f64>,
    converged: bool,
    iterations: Option<usize>,
    q_value: Option<f64>,
    q_init: Option<f64>,
    halving_events: Option<usize>,
    termination: Option<Termination>,
    ridge_flag: Option<bool>,
    objective_trace: Option<&'a [f64]>,
    std_error_kind: &'static str,
    time_scaling: Option<[f64; 2]>,
}

#[derive(Serialize)]
struct SandwichDump {
    a_hat: Vec<Vec<f64>>,
    b_hat: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    analogue: bool,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[allow(clippy::too_many_arguments)]
fn fit(
    data: &Path,
    method: MethodArg,
    kappa: &str,
    fve: f64,
    settings: FitSettings,
    out: &Path,
    dump_sandwich: Option<&Path>,
) -> Result<(), Failure> {
    let method = match method {
        MethodArg::Init => Method::Init,
        MethodArg::Cs => Method::LdaCs,
        MethodArg::Ar1 => Method::LdaAr,
        MethodArg::Fda if kappa.eq_ignore_ascii_case("auto") => {
            if !(fve > 0.0 && fve < 1.0) {
                return Err(config_error(format!("--fve must lie in (0, 1), got {fve}")));
            }
            Method::FdaAuto(fve)
        }
        MethodArg::Fda => match kappa.parse::<usize>() {
            Ok(k) if k >= 1 => Method::Fda(k),
            _ => {
                return Err(config_error(format!(
                    "--kappa must be a positive integer or 'auto', got '{kappa}'"
                )))
            }
        },
    };
    let dataset = load(data)?;
    let result = fit_method(&dataset, method, &settings, None)?;

    let mut w = csv::Writer::from_writer(create(out)?);
    w.write_record(["coefficient", "estimate", "std_error"])?;
    for (c, est) in result.beta_hat.iter().enumerate() {
        let se = result
            .sandwich
            .as_ref()
            .map_or("NA".to_string(), |s| s.std_errors[c].to_string());
        w.write_record([format!("x{}", c + 1), est.to_string(), se])?;
    }
    w.flush()?;

    let fr: Option<&FitResult> = result.fit.as_ref();
    let sidecar = FitSidecar {
        method: method.to_string(),
        n: dataset.n(),
        p: dataset.p(),
        kappa: result.kappa,
        fve: result.fve,
        bandwidth: result.bandwidth,
        converged: result.converged(),
        iterations: fr.map(|f| f.iterations),
        q_value: fr.map(|f| f.q_value),
        q_init: fr.map(|f| f.q_init),
        halving_events: fr.map(|f| f.halving_events),
        termination: fr.map(|f| f.termination),
        ridge_flag: fr.map(|f| f.ridge_flag),
        objective_trace: fr.map(|f| f.objective_trace.as_slice()),
        std_error_kind: match (&result.sandwich, method.is_fda()) {
            (None, _) => "none",
            (Some(_), true) => "sandwich",
            (Some(_), false) => "sandwich_analogue",
        },
        time_scaling: dataset.time_scaling().map(|s| [s.min, s.max]),
    };
    serde_json::to_writer_pretty(create(&out.with_extension("json"))?, &sidecar)?;

    if let Some(path) = dump_sandwich {
        let sw = result
            .sandwich
            .as_ref()
            .ok_or_else(|| Failure(EXIT_FAILURE, format!("{method} has no sandwich variance")))?;
        let dump = SandwichDump {
            a_hat: rows(&sw.a_hat),
            b_hat: rows(&sw.b_hat),
            sigma: rows(&sw.sigma),
            analogue: sw.analogue,
        };
        serde_json::to_writer_pretty(create(path)?, &dump)?;
    }
    if !result.converged() {
        log::warn!("{method} did not converge");
    }
    Ok(())
}

fn fpca(
    data: &Path,
    settings: FitSettings,
    out: &Path,
    surface: Option<&Path>,
    scree: Option<&Path>,
) -> Result<(), Failure> {
    let dataset = load(data)?;
    let prep = prepare_fda(&dataset, &settings)?;
    let es = &prep.eigsys;
    let mut w = csv::Writer::from_writer(create(out)?);
    let g = es.grid().len();
    let mut head = vec!["r".to_string(), "lambda".into(), "fve".into()];
    head.extend(es.grid().points().iter().map(|t| format!("t={t}")));
    w.write_record(&head)?;
    for r in 0..es.retained() {
        let mut rec = vec![
            (r + 1).to_string(),
            es.eigenvalues()[r].to_string(),
            es.fve()[r].to_string(),
        ];
        rec.extend((0..g).map(|j| es.eigenfunctions()[(r, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    if let Some(path) = surface {
        prep.surface.write_csv(create(path)?)?;
    }
    if let Some(path) = scree {
        create(path)?.write_all(emit_fve_scree(es).as_bytes())?;
    }
    log::info!("bandwidth {}", prep.bandwidth());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            scenario,
            n,
            m,
            reps,
            methods,
            seed,
            smooth,
            optim,
            out,
            format,
            emit_data,
            estimates,
            unsafe_params,
        } => simulate(
            &scenario,
            n,
            m,
            reps,
            &methods,
            seed,
            settings(&smooth, &optim)?,
            out.as_deref(),
            format,
            emit_data.as_deref(),
            estimates.as_deref(),
            unsafe_params,
        ),
        Command::Fit {
            data,
            method,
            kappa,
            fve,
            smooth,
            optim,
            out,
            dump_sandwich,
        } => fit(
            &data,
            method,
            &kappa,
            fve,
            settings(&smooth, &optim)?,
            &out,
            dump_sandwich.as_deref(),
        ),
        Command::Fpca {
            data,
            smooth,
            out,
            surface,
            scree,
        } => {
            let optim = OptimArgs {
                variance: VarianceArg::Identity,
                epsilon0: 1e-10,
                max_count: 500,
                max_halvings: 50,
            };
            fpca(
                &data,
                settings(&smooth, &optim)?,
                &out,
                surface.as_deref(),
                scree.as_deref(),
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
