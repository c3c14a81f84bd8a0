//! Continuous-updating objective, the AR statistic and its many-moment
//! recentring for independent observations.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::{chi2_quantile, chi2_sf};
use crate::error::{Error, Result};
use crate::linalg::thin_svd;

/// Smallest admissible value of the many-moment variance.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Evaluated moment conditions: row i of `g` is g_i(beta).
#[derive(Debug, Clone)]
pub struct MomentSet {
    g: DMatrix<f64>,
    beta: Vec<f64>,
}

impl MomentSet {
    pub fn new(g: DMatrix<f64>, beta: Vec<f64>) -> Result<Self> {
        let (n, k) = g.shape();
        if k == 0 {
            return Err(Error::InvalidInput("moment set needs k >= 1".into()));
        }
        if n <= k {
            return Err(Error::InvalidInput(format!(
                "moment set needs n > k, got n = {n}, k = {k}"
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("moment matrix has non-finite entries".into()));
        }
        Ok(MomentSet { g, beta })
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn k(&self) -> usize {
        self.g.ncols()
    }
}

/// P = G(G'G)^{-1}G' held as an orthonormal n x k factor Q with P = QQ'.
#[derive(Debug, Clone)]
pub struct Projector {
    q: DMatrix<f64>,
    diag: DVector<f64>,
}

impl Projector {
    /// Factor the column space of `g`. Needs full column rank.
    pub fn from_matrix(g: &DMatrix<f64>) -> Result<Self> {
        let k = g.ncols();
        let (u, _, _) = thin_svd(g).map_err(|rank| Error::MomentRankDeficient { rank, k })?;
        Ok(Self::from_orthonormal(u))
    }

    /// Wrap a factor whose columns are already orthonormal.
    pub fn from_orthonormal(q: DMatrix<f64>) -> Self {
        let diag = DVector::from_iterator(q.nrows(), q.row_iter().map(|r| r.norm_squared()));
        Projector { q, diag }
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn k(&self) -> usize {
        self.q.ncols()
    }

    pub fn max_diag(&self) -> f64 {
        self.diag.max()
    }

    pub fn sum_diag_sq(&self) -> f64 {
        self.diag.norm_squared()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.q.row(i).dot(&self.q.row(j))
    }

    /// P v without forming P.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.q * (self.q.tr_mul(v))
    }

    /// u'Pv.
    pub fn bilinear(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        self.q.tr_mul(u).dot(&self.q.tr_mul(v))
    }

    /// The full n x n matrix. Only sensible for small n.
    pub fn dense(&self) -> DMatrix<f64> {
        &self.q * self.q.transpose()
    }
}

pub fn build_projector(m: &MomentSet) -> Result<Projector> {
    Projector::from_matrix(m.g())
}

/// AR = iota' P iota = n times the CU objective.
pub fn ar_statistic(p: &Projector) -> f64 {
    p.q.row_sum().norm_squared()
}

/// sigma_n^2 = (2/k) sum_{i != j} P_ij^2, via (2/k)(k - sum P_ii^2).
pub fn sigma_n_sq(p: &Projector) -> Result<f64> {
    let k = p.k() as f64;
    let value = 2.0 / k * (k - p.sum_diag_sq());
    if !(value >= SIGMA_FLOOR) {
        return Err(Error::DegenerateVariance { value });
    }
    Ok(value)
}

/// Uniform-in-k critical value (2k)^{-1/2}(chi2_{1-alpha}(k) - k).
pub fn mi_ar_critical(k: usize, alpha: f64) -> f64 {
    let kf = k as f64;
    (chi2_quantile(1.0 - alpha, kf) - kf) / (2.0 * kf).sqrt()
}

/// Upper tail of (2k)^{-1/2}(chi2(k) - k) at `stat`.
pub fn mi_ar_p_value(stat: f64, k: usize) -> f64 {
    let kf = k as f64;
    chi2_sf(kf + (2.0 * kf).sqrt() * stat, kf)
}

/// The MI-AR rejection region written as a threshold on AR itself.
pub fn corollary1_threshold(p: &Projector, alpha: f64) -> f64 {
    let k = p.k() as f64;
    let q = chi2_quantile(1.0 - alpha, k);
    let shrink = (1.0 - p.sum_diag_sq() / k).max(0.0).sqrt();
    q - (q - k) * (1.0 - shrink)
}

/// Which test produced a [`TestResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Method {
    FixedKAR,
    MiAR,
    ClusterFixedKAR,
    ClusterMiAR,
    FixedKScore,
    MiScore,
    JackknifeAR,
    ClusterJackknifeAR,
    JackknifeScore,
    HfulT,
    ChExact,
}

impl Method {
    pub const ALL: [Method; 11] = [
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
        Method::ChExact,
    ];

    /// Short tag used on the command line and in CSV output.
    pub fn tag(self) -> &'static str {
        match self {
            Method::FixedKAR => "ar",
            Method::MiAR => "mi-ar",
            Method::ClusterFixedKAR => "cluster-ar",
            Method::ClusterMiAR => "cluster-mi-ar",
            Method::FixedKScore => "score",
            Method::MiScore => "mi-score",
            Method::JackknifeAR => "jk-ar",
            Method::ClusterJackknifeAR => "cluster-jk-ar",
            Method::JackknifeScore => "jk-score",
            Method::HfulT => "hful",
            Method::ChExact => "ch-exact",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.tag().to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.tag() == s || format!("{m:?}") == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method '{s}'")))
    }
}

/// Outcome of one test at one hypothesised parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: Method,
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub n: usize,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl TestResult {
    /// One-sided result: reject iff statistic > critical value.
    pub fn one_sided(
        method: Method,
        statistic: f64,
        critical_value: f64,
        p_value: f64,
        alpha: f64,
        n: usize,
        k: usize,
    ) -> Self {
        TestResult {
            method,
            statistic,
            critical_value,
            p_value: p_value.clamp(0.0, 1.0),
            reject: statistic > critical_value,
            alpha,
            n,
            k,
            p: None,
            h: None,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn with_diag(mut self, name: &str, value: f64) -> Self {
        self.diagnostics.insert(name.to_string(), value);
        self
    }

    pub fn diag(&self, name: &str) -> Option<f64> {
        self.diagnostics.get(name).copied()
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// MI-AR on an already factored projector. `n` is the row count of the
/// underlying moment matrix (observations or clusters).
pub(crate) fn mi_ar_from_projector(p: &Projector, alpha: f64, method: Method) -> Result<TestResult> {
    check_alpha(alpha)?;
    let k = p.k();
    let ar = ar_statistic(p);
    let s2 = sigma_n_sq(p)?;
    let stat = (ar - k as f64) / (k as f64 * s2).sqrt();
    let crit = mi_ar_critical(k, alpha);
    Ok(
        TestResult::one_sided(method, stat, crit, mi_ar_p_value(stat, k), alpha, p.n(), k)
            .with_diag("ar", ar)
            .with_diag("sigma_sq", s2)
            .with_diag("max_pii", p.max_diag())
            .with_diag("k_over_n", k as f64 / p.n() as f64),
    )
}

pub(crate) fn fixed_k_from_projector(p: &Projector, alpha: f64, method: Method) -> Result<TestResult> {
    check_alpha(alpha)?;
    let k = p.k();
    let ar = ar_statistic(p);
    let crit = chi2_quantile(1.0 - alpha, k as f64);
    Ok(
        TestResult::one_sided(method, ar, crit, chi2_sf(ar, k as f64), alpha, p.n(), k)
            .with_diag("max_pii", p.max_diag())
            .with_diag("k_over_n", k as f64 / p.n() as f64),
    )
}

pub fn mi_ar_test(m: &MomentSet, alpha: f64) -> Result<TestResult> {
    let p = build_projector(m)?;
    mi_ar_from_projector(&p, alpha, Method::MiAR)
}

pub fn fixed_k_ar_test(m: &MomentSet, alpha: f64) -> Result<TestResult> {
    let p = build_projector(m)?;
    fixed_k_from_projector(&p, alpha, Method::FixedKAR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::normal_quantile;

    fn dense_projector(g: &DMatrix<f64>) -> DMatrix<f64> {
        let gtg = g.transpose() * g;
        g * gtg.try_inverse().unwrap() * g.transpose()
    }

    #[test]
    fn constant_column_projector() {
        let g = DMatrix::from_element(4, 1, 1.0);
        let p = Projector::from_matrix(&g).unwrap();
        let d = p.dense();
        assert!(d.iter().all(|v| (v - 0.25).abs() < 1e-14));
        assert!((ar_statistic(&p) - 4.0).abs() < 1e-12);
        assert!((sigma_n_sq(&p).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn coordinate_projector_is_full_rank() {
        let mut g = DMatrix::zeros(4, 2);
        g[(0, 0)] = 1.0;
        g[(1, 1)] = 1.0;
        let p = Projector::from_matrix(&g).unwrap();
        let d = p.dense();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]));
        assert!((d - want).amax() < 1e-14);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let g = DMatrix::from_fn(4, 2, |_, j| (j + 1) as f64);
        let m = MomentSet::new(g, vec![]).unwrap();
        assert!(matches!(build_projector(&m), Err(Error::MomentRankDeficient { rank: 1, k: 2 })));
    }

    #[test]
    fn orthogonal_to_iota_gives_zero() {
        let g = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let p = Projector::from_matrix(&g).unwrap();
        assert!(ar_statistic(&p).abs() < 1e-14);
        let m = MomentSet::new(g, vec![]).unwrap();
        assert!(!fixed_k_ar_test(&m, 0.05).unwrap().reject);
    }

    #[test]
    fn ar_dense_and_factored_agree() {
        let g = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0]);
        let p = Projector::from_matrix(&g).unwrap();
        let dense = dense_projector(&g);
        let iota = DVector::from_element(4, 1.0);
        let oracle = (iota.transpose() * &dense * &iota)[(0, 0)];
        assert!((ar_statistic(&p) - oracle).abs() < 1e-10);
        // k + sum_{i != j} P_ij
        let off: f64 = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| dense[(i, j)])
            .sum();
        assert!((ar_statistic(&p) - (2.0 + off)).abs() < 1e-10);
    }

    #[test]
    fn identity_projector_is_degenerate() {
        let p = Projector::from_matrix(&DMatrix::identity(3, 3)).unwrap();
        assert!(matches!(sigma_n_sq(&p), Err(Error::DegenerateVariance { .. })));
    }

    #[test]
    fn balanced_design_sigma() {
        // Orthonormal columns with constant leverage k/n: a Hadamard-like block.
        let n = 8;
        let h = DMatrix::from_fn(n, 2, |i, j| {
            let s = if j == 0 || i % 2 == 0 { 1.0 } else { -1.0 };
            s / (n as f64).sqrt()
        });
        let p = Projector::from_orthonormal(h);
        let want = 2.0 * (1.0 - 2.0 / n as f64);
        assert!((sigma_n_sq(&p).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn critical_value_examples() {
        let c1 = mi_ar_critical(1, 0.05);
        assert!((c1 - (3.841458820694124 - 1.0) / 2f64.sqrt()).abs() < 1e-8);
        let big = mi_ar_critical(1_000_000, 0.05);
        assert!((big - normal_quantile(0.95)).abs() < 5e-3);
        for k in [1, 2, 5, 40, 300] {
            assert!(mi_ar_critical(k, 0.5) < 0.0);
        }
    }

    #[test]
    fn fixed_k_rejects_large_ar() {
        // Single column with AR = 5 > 3.84.
        let g = DMatrix::from_column_slice(5, 1, &[1.0, 1.0, 1.0, 1.0, 1.0]);
        let p = Projector::from_matrix(&g).unwrap();
        let r = fixed_k_from_projector(&p, 0.05, Method::FixedKAR).unwrap();
        assert!((r.statistic - 5.0).abs() < 1e-12);
        assert!(r.reject);
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
    }
}
