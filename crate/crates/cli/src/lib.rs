//! Command line front end: `test`, `invert` and `simulate`.
//!
//! Exit codes: 0 when the command ran, 2 for bad input, 3 for numerical
//! failures. Errors go to stderr as a single JSON object.

pub mod data;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use miar::moments::{ch_exact_test, median_iv_moments};
use miar::{
    cluster_fixed_k_ar_test, cluster_mi_ar_test, fixed_k_ar_test, invert_test, mi_ar_test, run_methods, ClusterMap,
    DMatrix, DVector, Error, GridSpec, LinearIVModel, Method, Psi, QuantileSpec, Result, SimConfig, TestResult,
    DEFAULT_SEED,
};

use data::Frame;

/// Version of every JSON object the CLI prints.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "miar", version, about = "Many-moment robust Anderson-Rubin and score tests")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Test one hypothesised parameter value.
    Test(TestArgs),
    /// Confidence sets by inverting a test over a grid.
    Invert(InvertArgs),
    /// Monte Carlo rejection rates from a TOML or JSON config.
    Simulate(SimArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MomentKind {
    Linear,
    Quantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PsiArg {
    Identity,
    Standardize,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Method tag: ar, mi-ar, score, mi-score, jk-ar, jk-score, hful, ch-exact.
    #[arg(long)]
    method: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    y: String,
    /// Endogenous regressors; comma separated, `prefix*` allowed.
    #[arg(long)]
    x: String,
    /// Instruments.
    #[arg(long)]
    z: String,
    /// Exogenous controls, partialled out (linear moments only).
    #[arg(long)]
    f: Option<String>,
    /// Cluster labels; switches ar, mi-ar and jk-ar to their clustered versions.
    #[arg(long)]
    cluster: Option<String>,
    /// Moment family; ch-exact implies quantile.
    #[arg(long, value_enum)]
    moments: Option<MomentKind>,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, value_enum, default_value_t = PsiArg::Identity)]
    psi: PsiArg,
    /// Simulation draws for ch-exact.
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Hypothesised parameters, "b1,b2,...". Quantile moments take the
    /// intercept first.
    #[arg(long, allow_hyphen_values = true)]
    beta: String,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct InvertArgs {
    #[command(flatten)]
    data: DataArgs,
    /// "lo:hi:step" for the inverted parameter.
    #[arg(long, allow_hyphen_values = true)]
    grid: String,
    #[arg(long, default_value_t = 0)]
    param_index: usize,
    /// Values of the other parameters; zeros when omitted.
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<String>,
    /// Repeat for several levels.
    #[arg(long = "alpha", required = true)]
    alphas: Vec<f64>,
    /// Where the per-point CSV goes; the interval summary is printed.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report("UsageError", &e.to_string(), 2);
            return 2;
        }
    };
    let outcome = match cli.cmd {
        Cmd::Test(a) => cmd_test(&a),
        Cmd::Invert(a) => cmd_invert(&a),
        Cmd::Simulate(a) => cmd_simulate(&a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            report(e.name(), &e.to_string(), code);
            code
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

fn report(name: &str, message: &str, code: i32) {
    let obj = json!({
        "schema_version": SCHEMA_VERSION,
        "error": name,
        "message": message.trim_end(),
        "exit_code": code,
    });
    eprintln!("{obj}");
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::InvalidInput(format!("'{t}' in '{s}' is not a finite number")))
        })
        .collect()
}

enum Problem {
    Linear(LinearIVModel),
    Quantile {
        y: DVector<f64>,
        x: DMatrix<f64>,
        z: DMatrix<f64>,
        clusters: Option<ClusterMap>,
        tau: f64,
        psi: Psi,
        draws: usize,
        seed: u64,
    },
}

impl Problem {
    fn n_params(&self) -> usize {
        match self {
            Problem::Linear(m) => m.p(),
            Problem::Quantile { x, .. } => x.ncols() + 1,
        }
    }

    fn evaluate(&self, method: Method, beta: &[f64], alpha: f64) -> Result<TestResult> {
        if beta.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "--beta has {} entries, expected {}",
                beta.len(),
                self.n_params()
            )));
        }
        match self {
            Problem::Linear(m) => run_methods(m, beta, &[method], alpha).remove(0),
            Problem::Quantile { y, x, z, clusters, tau, psi, draws, seed } => {
                let q = QuantileSpec { tau: *tau, theta: beta.to_vec(), psi: *psi };
                match (method, clusters) {
                    (Method::ChExact, None) => ch_exact_test(y, x, z, &q, alpha, *draws, *seed),
                    (Method::MiAR, None) => mi_ar_test(&median_iv_moments(y, x, z, &q)?, alpha),
                    (Method::FixedKAR, None) => fixed_k_ar_test(&median_iv_moments(y, x, z, &q)?, alpha),
                    (Method::ClusterMiAR, Some(c)) => cluster_mi_ar_test(&median_iv_moments(y, x, z, &q)?, c, alpha),
                    (Method::ClusterFixedKAR, Some(c)) => {
                        cluster_fixed_k_ar_test(&median_iv_moments(y, x, z, &q)?, c, alpha)
                    }
                    _ => Err(Error::InvalidInput(format!("{method} is not available for quantile moments"))),
                }
            }
        }
    }

    fn warnings(&self) -> Vec<String> {
        match self {
            Problem::Quantile { tau, .. } if *tau != 0.5 => vec![format!(
                "quantile level {tau} is not the median; the moments are not sign symmetric and size is not guaranteed"
            )],
            _ => Vec::new(),
        }
    }
}

/// The method actually run, given whether clusters were supplied.
fn resolve_method(tag: &str, clustered: bool) -> Result<Method> {
    let m: Method = tag.parse()?;
    let cluster_variant = match m {
        Method::FixedKAR => Some(Method::ClusterFixedKAR),
        Method::MiAR => Some(Method::ClusterMiAR),
        Method::JackknifeAR => Some(Method::ClusterJackknifeAR),
        Method::ClusterFixedKAR | Method::ClusterMiAR | Method::ClusterJackknifeAR => Some(m),
        _ => None,
    };
    match (clustered, cluster_variant) {
        (true, Some(c)) => Ok(c),
        (true, None) => Err(Error::InvalidInput(format!("{m} has no clustered version"))),
        (false, Some(c)) if c == m => Err(Error::InvalidInput(format!("{m} needs --cluster"))),
        (false, _) => Ok(m),
    }
}

fn load(a: &DataArgs) -> Result<(Method, Problem)> {
    let frame = Frame::read_path(&a.data)?;
    let method = resolve_method(&a.method, a.cluster.is_some())?;
    let y = frame.numeric(&a.y)?;
    let x = frame.matrix(&frame.resolve(&a.x)?)?;
    let z = frame.matrix(&frame.resolve(&a.z)?)?;
    let clusters = a.cluster.as_deref().map(|c| frame.labels(c).map(|l| ClusterMap::from_labels(&l))).transpose()?;
    let kind = a.moments.unwrap_or(if method == Method::ChExact { MomentKind::Quantile } else { MomentKind::Linear });
    let problem = match kind {
        MomentKind::Linear => {
            let mut m = LinearIVModel::new(y, x, z)?;
            if let Some(f) = &a.f {
                m = m.with_controls(frame.matrix(&frame.resolve(f)?)?)?;
            }
            if let Some(c) = clusters {
                m = m.with_clusters(c)?;
            }
            Problem::Linear(m)
        }
        MomentKind::Quantile => {
            if a.f.is_some() {
                return Err(Error::InvalidInput("--f applies to linear moments only".into()));
            }
            if !(a.tau > 0.0 && a.tau < 1.0) {
                return Err(Error::InvalidInput(format!("--tau must lie in (0, 1), got {}", a.tau)));
            }
            let psi = match a.psi {
                PsiArg::Identity => Psi::Identity,
                PsiArg::Standardize => Psi::Standardize,
            };
            Problem::Quantile { y, x, z, clusters, tau: a.tau, psi, draws: a.draws, seed: a.seed }
        }
    };
    Ok((method, problem))
}

#[derive(Serialize)]
struct TestOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    result: &'a TestResult,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::InvalidInput(format!("JSON: {e}")))?;
    println!("{s}");
    Ok(())
}

fn cmd_test(a: &TestArgs) -> Result<()> {
    let beta = parse_list(&a.beta)?;
    let (method, problem) = load(&a.data)?;
    let result = problem.evaluate(method, &beta, a.alpha)?;
    print_json(&TestOut { schema_version: SCHEMA_VERSION, result: &result, warnings: problem.warnings() })
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".into()
    }
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::InvalidInput(format!("cannot write {}: {e}", path.display())))
}

fn cmd_invert(a: &InvertArgs) -> Result<()> {
    let (method, problem) = load(&a.data)?;
    let np = problem.n_params();
    if a.param_index >= np {
        return Err(Error::InvalidInput(format!("--param-index {} but the model has {np} parameters", a.param_index)));
    }
    let base = match &a.beta {
        Some(b) => parse_list(b)?,
        None => vec![0.0; np],
    };
    if base.len() != np {
        return Err(Error::DimensionMismatch(format!("--beta has {} entries, expected {np}", base.len())));
    }
    let grid = GridSpec::parse(a.param_index, &a.grid)?;
    for &alpha in &a.alphas {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidInput(format!("--alpha must lie in (0, 1), got {alpha}")));
        }
    }

    let io = |e: csv::Error| Error::InvalidInput(format!("CSV: {e}"));
    let mut wr = csv::Writer::from_writer(create(&a.out)?);
    wr.write_record(["alpha", "grid_point", "statistic", "critical", "accepted", "error"]).map_err(io)?;
    let mut sets = Vec::new();
    for &alpha in &a.alphas {
        let eval = |b: f64| {
            let mut beta = base.clone();
            beta[a.param_index] = b;
            problem.evaluate(method, &beta, alpha).map(|r| (r.statistic, r.critical_value))
        };
        let cs = invert_test(eval, &grid)?;
        for p in &cs.points {
            wr.write_record([
                alpha.to_string(),
                p.value.to_string(),
                num(p.statistic),
                num(p.critical_value),
                p.accepted.to_string(),
                p.error.clone().unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        sets.push(json!({
            "alpha": alpha,
            "interval": cs.interval.map(|(l, h)| [l, h]),
            "length": cs.length(),
            "accepted_points": cs.accepted().len(),
            "failed_points": cs.points.iter().filter(|p| p.error.is_some()).count(),
            "nonconvex": cs.nonconvex,
            "touches_boundary": cs.touches_boundary,
        }));
    }
    wr.flush().map_err(|e| Error::InvalidInput(format!("CSV: {e}")))?;
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "method": method,
        "param_index": a.param_index,
        "grid": { "lo": grid.lo, "hi": grid.hi, "step": grid.step, "points": grid.points().len() },
        "sets": sets,
        "warnings": problem.warnings(),
    }))
}

fn cmd_simulate(a: &SimArgs) -> Result<()> {
    let mut cfg = SimConfig::from_path(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for n in cfg.notices() {
        eprintln!("notice: {n}");
    }
    let res = miar::run_rejection_rates(&cfg)?;
    res.write_csv(create(&a.out)?)?;
    let mut out = std::io::stdout().lock();
    let line = |out: &mut std::io::StdoutLock, s: String| {
        writeln!(out, "{s}").map_err(|e| Error::InvalidInput(format!("stdout: {e}")))
    };
    line(&mut out, format!("{:<14} {:>4} {:>10} {:>8} {:>8} {:>7}", "method", "k", "param", "rate", "mc_se", "errors"))?;
    for r in &res.rows {
        line(
            &mut out,
            format!(
                "{:<14} {:>4} {:>10} {:>8} {:>8} {:>7}",
                r.method.tag(),
                r.k,
                r.true_param,
                if r.rate.is_finite() { format!("{:.4}", r.rate) } else { "NA".into() },
                if r.mc_se.is_finite() { format!("{:.4}", r.mc_se) } else { "NA".into() },
                r.errors
            ),
        )?;
    }
    Ok(())
}
