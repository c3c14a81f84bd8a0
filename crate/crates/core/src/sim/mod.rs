//! Monte Carlo rejection rates for the three simulation designs.
//!
//! Replication r draws from stream r of a ChaCha8 generator keyed by the
//! master seed, so results do not depend on how rayon schedules the work.
//! All methods in a replication see the same data, and the same stream is
//! reused across parameter cells (common random numbers).

mod dgp;

pub use dgp::{
    cluster_sizes, dgp_linear_iv, dgp_median_iv, dgp_panel_tobit, CenteredGamma, LinearIvDesign,
    MedianIvData, CLUSTER_CYCLE, GAMMA_NORMAL_LIMIT, PHI,
};

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar::{fixed_k_ar_test, mi_ar_test, Method, MomentSet, TestResult};
use crate::confidence::profile_minimize;
use crate::dist::normal_quantile;
use crate::error::{Error, Result};
use crate::iv::run_methods;
use crate::moments::{ch_exact_test, median_iv_moments, panel_tobit_moments, QuantileSpec};

fn d_tobit_n() -> usize {
    200
}
fn d_one() -> f64 {
    1.0
}
fn d_starts() -> usize {
    3
}
fn d_median_n() -> usize {
    100
}
fn d_half() -> f64 {
    0.5
}
fn d_rho_median() -> f64 {
    0.8
}
fn d_zeta_median() -> f64 {
    1.5
}
fn d_draws() -> usize {
    1000
}
fn d_linear_n() -> usize {
    800
}
fn d_rho_linear() -> f64 {
    0.3
}
fn d_kappa() -> f64 {
    2.0
}
fn d_alpha() -> f64 {
    0.05
}
fn d_seed() -> u64 {
    DEFAULT_SEED
}

/// Seed used whenever none is given.
pub const DEFAULT_SEED: u64 = 20240229;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TobitParams {
    #[serde(default = "d_tobit_n")]
    pub n: usize,
    /// Panel lengths to sweep.
    pub t: Vec<usize>,
    /// Regressor counts to sweep.
    pub p: Vec<usize>,
    /// Null value of every coefficient; the other true coefficients also
    /// equal it while beta_1 follows `beta_grid`.
    #[serde(default = "d_one")]
    pub beta0: f64,
    /// Test only beta_1 = beta0, minimising over the other coefficients.
    #[serde(default)]
    pub marginal: bool,
    #[serde(default = "d_starts")]
    pub starts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MedianIvParams {
    #[serde(default = "d_median_n")]
    pub n: usize,
    pub k: Vec<usize>,
    #[serde(default = "d_half")]
    pub pi: f64,
    #[serde(default = "d_rho_median")]
    pub rho: f64,
    #[serde(default = "d_zeta_median")]
    pub zeta: f64,
    #[serde(default = "d_one")]
    pub sigma_sq: f64,
    #[serde(default = "d_half")]
    pub tau: f64,
    /// Simulated draws for the exact quantile test.
    #[serde(default = "d_draws")]
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearIvParams {
    #[serde(default = "d_linear_n")]
    pub n: usize,
    pub k: Vec<usize>,
    pub pi: f64,
    #[serde(default = "d_rho_linear")]
    pub rho: f64,
    #[serde(default = "d_kappa")]
    pub kappa: f64,
    #[serde(default = "d_one")]
    pub lambda: f64,
    #[serde(default)]
    pub zeta: Option<f64>,
    #[serde(default)]
    pub beta0: f64,
}

/// Which design, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dgp", content = "params", rename_all = "snake_case")]
pub enum Dgp {
    PanelTobit(TobitParams),
    MedianIv(MedianIvParams),
    LinearIv(LinearIvParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(flatten)]
    pub dgp: Dgp,
    pub methods: Vec<Method>,
    pub reps: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// True parameter values (beta_1 for the panel, the slope otherwise).
    /// Defaults to the null value.
    #[serde(default)]
    pub beta_grid: Option<Vec<f64>>,
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(s).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(s).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads TOML, or JSON when the file name ends in `.json`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let mut s = String::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_string(&mut s))
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&s)
        } else {
            Self::from_toml_str(&s)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.methods.is_empty() {
            return bad("no methods given".into());
        }
        if let Some(g) = &self.beta_grid {
            if g.is_empty() || g.iter().any(|v| !v.is_finite()) {
                return bad("beta_grid must be a non-empty list of finite numbers".into());
            }
        }
        let allowed: &[Method] = match &self.dgp {
            Dgp::PanelTobit(p) => {
                if p.t.is_empty() || p.p.is_empty() || p.t.iter().any(|&t| t < 2) || p.p.contains(&0) {
                    return bad("panel needs non-empty t (each >= 2) and p (each >= 1)".into());
                }
                if p.marginal && p.starts == 0 {
                    return bad("marginal tests need starts >= 1".into());
                }
                &[Method::FixedKAR, Method::MiAR]
            }
            Dgp::MedianIv(p) => {
                if p.k.is_empty() || p.k.iter().any(|&k| k == 0 || k >= p.n) {
                    return bad("median IV needs 1 <= k < n for every k".into());
                }
                if !(p.tau > 0.0 && p.tau < 1.0) || p.draws == 0 {
                    return bad("median IV needs tau in (0, 1) and draws >= 1".into());
                }
                CenteredGamma::new(p.zeta, p.sigma_sq)?;
                &[Method::FixedKAR, Method::MiAR, Method::ChExact]
            }
            Dgp::LinearIv(p) => {
                if p.k.is_empty() {
                    return bad("linear IV needs at least one k".into());
                }
                for &k in &p.k {
                    self.linear_design(p, k).validate()?;
                }
                if let Some(z) = p.zeta {
                    CenteredGamma::new(z, 1.0)?;
                }
                &[
                    Method::FixedKAR,
                    Method::MiAR,
                    Method::ClusterFixedKAR,
                    Method::ClusterMiAR,
                    Method::FixedKScore,
                    Method::MiScore,
                    Method::JackknifeAR,
                    Method::ClusterJackknifeAR,
                    Method::JackknifeScore,
                    Method::HfulT,
                ]
            }
        };
        if let Some(m) = self.methods.iter().find(|m| !allowed.contains(m)) {
            return bad(format!("method {m} is not available for this design"));
        }
        Ok(())
    }

    /// Things a caller may want to tell the user, such as a skewness small
    /// enough that Normal draws replace the Gamma ones.
    pub fn notices(&self) -> Vec<String> {
        let zeta = match &self.dgp {
            Dgp::MedianIv(p) => Some(p.zeta),
            Dgp::LinearIv(p) => p.zeta,
            Dgp::PanelTobit(_) => None,
        };
        match zeta {
            Some(z) if z <= GAMMA_NORMAL_LIMIT => {
                vec![format!("zeta = {z} is at most {GAMMA_NORMAL_LIMIT}; drawing from the Normal limit")]
            }
            _ => Vec::new(),
        }
    }

    fn linear_design(&self, p: &LinearIvParams, k: usize) -> LinearIvDesign {
        LinearIvDesign { n: p.n, k, pi: p.pi, rho: p.rho, kappa: p.kappa, lambda: p.lambda, zeta: p.zeta }
    }

    fn null_value(&self) -> f64 {
        match &self.dgp {
            Dgp::PanelTobit(p) => p.beta0,
            Dgp::MedianIv(_) => 1.0,
            Dgp::LinearIv(p) => p.beta0,
        }
    }

    fn grid(&self) -> Vec<f64> {
        self.beta_grid.clone().unwrap_or_else(|| vec![self.null_value()])
    }
}

/// One rejection rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub method: Method,
    /// Number of moment conditions.
    pub k: usize,
    pub true_param: f64,
    /// Rejections over replications without an error; NaN if every one failed.
    pub rate: f64,
    pub reps: usize,
    pub errors: usize,
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimResult {
    pub rows: Vec<SimRow>,
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NA".to_string()
    }
}

impl SimResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let io = |e: csv::Error| Error::InvalidInput(format!("writing CSV: {e}"));
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["method", "k", "true_param", "rate", "reps", "errors", "mc_se"]).map_err(io)?;
        for r in &self.rows {
            wr.write_record([
                r.method.tag().to_string(),
                r.k.to_string(),
                fmt_num(r.true_param),
                fmt_num(r.rate),
                r.reps.to_string(),
                r.errors.to_string(),
                fmt_num(r.mc_se),
            ])
            .map_err(io)?;
        }
        wr.flush().map_err(|e| Error::InvalidInput(format!("writing CSV: {e}")))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }

    /// Rows for one method, in cell order.
    pub fn method(&self, m: Method) -> Vec<&SimRow> {
        self.rows.iter().filter(|r| r.method == m).collect()
    }

    /// The row for (method, k, true_param).
    pub fn get(&self, m: Method, k: usize, true_param: f64) -> Option<&SimRow> {
        self.rows.iter().find(|r| r.method == m && r.k == k && r.true_param == true_param)
    }
}

/// Per-method outcome of one replication: `None` on error.
type RepOutcome = Vec<Option<bool>>;

fn decisions(results: Vec<Result<TestResult>>) -> RepOutcome {
    results.into_iter().map(|r| r.ok().map(|t| t.reject)).collect()
}

fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// A design cell: a value of k (or T, p) and a true parameter.
enum Cell {
    Tobit { t: usize, p: usize, beta1: f64 },
    Median { k: usize, slope: f64 },
    Linear { design: LinearIvDesign, beta: f64 },
}

impl Cell {
    fn k(&self) -> usize {
        match self {
            Cell::Tobit { t, p, .. } => (t / 2) * p,
            Cell::Median { k, .. } => *k,
            Cell::Linear { design, .. } => design.k,
        }
    }

    fn true_param(&self) -> f64 {
        match self {
            Cell::Tobit { beta1, .. } => *beta1,
            Cell::Median { slope, .. } => *slope,
            Cell::Linear { beta, .. } => *beta,
        }
    }
}

fn cells(cfg: &SimConfig) -> Vec<Cell> {
    let grid = cfg.grid();
    let mut out = Vec::new();
    match &cfg.dgp {
        Dgp::PanelTobit(p) => {
            for &t in &p.t {
                for &pp in &p.p {
                    for &b in &grid {
                        out.push(Cell::Tobit { t, p: pp, beta1: b });
                    }
                }
            }
        }
        Dgp::MedianIv(p) => {
            for &k in &p.k {
                for &b in &grid {
                    out.push(Cell::Median { k, slope: b });
                }
            }
        }
        Dgp::LinearIv(p) => {
            for &k in &p.k {
                for &b in &grid {
                    out.push(Cell::Linear { design: cfg.linear_design(p, k), beta: b });
                }
            }
        }
    }
    out
}

fn ar_test(method: Method, g: &MomentSet, alpha: f64) -> Result<TestResult> {
    match method {
        Method::MiAR => mi_ar_test(g, alpha),
        Method::FixedKAR => fixed_k_ar_test(g, alpha),
        other => Err(Error::InvalidInput(format!("{other} is not an AR test"))),
    }
}

fn tobit_rep(cfg: &SimConfig, tp: &TobitParams, t: usize, p: usize, beta1: f64, rng: &mut ChaCha8Rng) -> RepOutcome {
    let mut beta = vec![tp.beta0; p];
    beta[0] = beta1;
    let data = match dgp_panel_tobit(tp.n, t, &beta, rng) {
        Ok(d) => d,
        Err(_) => return vec![None; cfg.methods.len()],
    };
    let null = vec![tp.beta0; p];
    if !tp.marginal || p == 1 {
        let g = panel_tobit_moments(&data, &null);
        return decisions(cfg.methods.iter().map(|&m| g.clone().and_then(|g| ar_test(m, &g, cfg.alpha))).collect());
    }
    // reject beta_1 = beta0 only if every value of the other coefficients rejects
    let mut starts = vec![null[1..].to_vec()];
    for _ in 1..tp.starts {
        starts.push(null[1..].iter().map(|v| v + rng.sample::<f64, _>(rand_distr::StandardNormal)).collect());
    }
    cfg.methods
        .iter()
        .map(|&m| {
            let margin = |nu: &[f64]| {
                let mut b = vec![tp.beta0];
                b.extend_from_slice(nu);
                panel_tobit_moments(&data, &b)
                    .and_then(|g| ar_test(m, &g, cfg.alpha))
                    .map_or(f64::INFINITY, |r| r.statistic - r.critical_value)
            };
            let best = profile_minimize(margin, &starts, 200, 1e-6);
            best.value.is_finite().then_some(best.value > 0.0)
        })
        .collect()
}

fn median_rep(cfg: &SimConfig, mp: &MedianIvParams, k: usize, slope: f64, rng: &mut ChaCha8Rng) -> RepOutcome {
    let data = match dgp_median_iv(mp.n, k, mp.pi, mp.rho, mp.zeta, mp.sigma_sq, slope, rng) {
        Ok(d) => d,
        Err(_) => return vec![None; cfg.methods.len()],
    };
    let q = QuantileSpec::median(vec![-1.0 + normal_quantile(mp.tau), 1.0]);
    let q = QuantileSpec { tau: mp.tau, ..q };
    let draw_seed: u64 = rng.random();
    let g = median_iv_moments(&data.y, &data.x, &data.z, &q);
    decisions(
        cfg.methods
            .iter()
            .map(|&m| match m {
                Method::ChExact => ch_exact_test(&data.y, &data.x, &data.z, &q, cfg.alpha, mp.draws, draw_seed),
                _ => g.clone().and_then(|g| ar_test(m, &g, cfg.alpha)),
            })
            .collect(),
    )
}

fn linear_rep(cfg: &SimConfig, lp: &LinearIvParams, d: &LinearIvDesign, beta: f64, rng: &mut ChaCha8Rng) -> RepOutcome {
    match dgp_linear_iv(d, beta, rng) {
        Ok(m) => decisions(run_methods(&m, &[lp.beta0], &cfg.methods, cfg.alpha)),
        Err(_) => vec![None; cfg.methods.len()],
    }
}

fn run_rep(cfg: &SimConfig, cell: &Cell, rep: usize) -> RepOutcome {
    let mut rng = rep_rng(cfg.seed, rep);
    match (&cfg.dgp, cell) {
        (Dgp::PanelTobit(tp), Cell::Tobit { t, p, beta1 }) => tobit_rep(cfg, tp, *t, *p, *beta1, &mut rng),
        (Dgp::MedianIv(mp), Cell::Median { k, slope }) => median_rep(cfg, mp, *k, *slope, &mut rng),
        (Dgp::LinearIv(lp), Cell::Linear { design, beta }) => linear_rep(cfg, lp, design, *beta, &mut rng),
        _ => unreachable!("cells are built from the same config"),
    }
}

/// Rejection rates for every (cell, method) pair in the config.
pub fn run_rejection_rates(cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for cell in cells(cfg) {
        let outcomes: Vec<RepOutcome> = (0..cfg.reps).into_par_iter().map(|r| run_rep(cfg, &cell, r)).collect();
        for (j, &method) in cfg.methods.iter().enumerate() {
            let errors = outcomes.iter().filter(|o| o[j].is_none()).count();
            let rejections = outcomes.iter().filter(|o| o[j] == Some(true)).count();
            let valid = cfg.reps - errors;
            let (rate, mc_se) = if valid == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let rate = rejections as f64 / valid as f64;
                (rate, (rate * (1.0 - rate) / valid as f64).sqrt())
            };
            rows.push(SimRow {
                method,
                k: cell.k(),
                true_param: cell.true_param(),
                rate,
                reps: cfg.reps,
                errors,
                mc_se,
            });
        }
    }
    Ok(SimResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINEAR: &str = r#"
dgp = "linear_iv"
methods = ["mi-ar", "ar", "mi-score"]
reps = 6
seed = 11

[params]
n = 120
k = [6]
pi = 0.3
"#;

    #[test]
    fn toml_and_json_configs() {
        let cfg = SimConfig::from_toml_str(LINEAR).unwrap();
        assert_eq!(cfg.alpha, 0.05);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(SimConfig::from_json_str(&json).unwrap(), cfg);
        assert!(SimConfig::from_toml_str(&LINEAR.replace("reps = 6", "reps = 0")).is_err());
        assert!(SimConfig::from_toml_str(&LINEAR.replace("\"ar\"", "\"ch-exact\"")).is_err());
        assert!(SimConfig::from_toml_str(&LINEAR.replace("k = [6]", "k = [3]")).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let cfg = SimConfig::from_toml_str(LINEAR).unwrap();
        let res = run_rejection_rates(&cfg).unwrap();
        let csv = res.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "method,k,true_param,rate,reps,errors,mc_se");
        assert_eq!(lines.count(), 3);
        for r in &res.rows {
            assert!((0.0..=1.0).contains(&r.rate));
            assert!((r.mc_se - (r.rate * (1.0 - r.rate) / (r.reps - r.errors) as f64).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn single_rep_rate_is_binary() {
        let cfg = SimConfig::from_toml_str(&LINEAR.replace("reps = 6", "reps = 1")).unwrap();
        for r in run_rejection_rates(&cfg).unwrap().rows {
            assert!(r.rate == 0.0 || r.rate == 1.0);
        }
    }
}
