//! Heteroskedastic linear IV: the CU score, its many-instrument variance,
//! score tests, jackknife baselines and HFUL.

mod hful;
mod jackknife;
mod population;
mod score;
mod weighting;

pub use hful::{hful_estimate, hful_test, HfulFit, HFUL_C};
pub use jackknife::{cluster_jackknife_ar_test, jackknife_ar_test, jackknife_score_test};
pub use population::{population_score_variance, PopulationDesign, PopulationVariance};
pub use score::{
    cu_score, fixed_k_score_test, mi_score_test, score_and_variance, score_tests_from,
    variance_estimator, variance_estimator_dense, variance_estimator_streaming, ScoreVariance,
    DENSE_LIMIT,
};
pub use weighting::{clustered_weighting, weighting_projector, WeightingProjector};

use nalgebra::{DMatrix, DVector};

use crate::ar::{check_alpha, fixed_k_from_projector, mi_ar_from_projector, Method, MomentSet, Projector, TestResult};
use crate::cluster::ClusterMap;
use crate::error::{Error, Result};
use crate::linalg;

/// y = X beta + eps with instruments Z, optional controls F and clusters.
#[derive(Debug, Clone)]
pub struct LinearIVModel {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    f: Option<DMatrix<f64>>,
    clusters: Option<ClusterMap>,
}

impl LinearIVModel {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        let (p, k) = (x.ncols(), z.ncols());
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "y has {n} rows, X has {}, Z has {}",
                x.nrows(),
                z.nrows()
            )));
        }
        if p == 0 || k < p || n <= k {
            return Err(Error::InvalidInput(format!(
                "need n > k >= p >= 1, got n = {n}, k = {k}, p = {p}"
            )));
        }
        let finite = y.iter().chain(x.iter()).chain(z.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite value in y, X or Z".into()));
        }
        let rank = linalg::rank(&z);
        if rank < k {
            return Err(Error::MomentRankDeficient { rank, k });
        }
        Ok(LinearIVModel { y, x, z, f: None, clusters: None })
    }

    pub fn with_controls(mut self, f: DMatrix<f64>) -> Result<Self> {
        if f.nrows() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "controls have {} rows, model has {}",
                f.nrows(),
                self.n()
            )));
        }
        self.f = Some(f);
        Ok(self)
    }

    pub fn with_clusters(mut self, c: ClusterMap) -> Result<Self> {
        if c.n() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "cluster map covers {} rows, model has {}",
                c.n(),
                self.n()
            )));
        }
        self.clusters = Some(c);
        Ok(self)
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn controls(&self) -> Option<&DMatrix<f64>> {
        self.f.as_ref()
    }

    pub fn clusters(&self) -> Option<&ClusterMap> {
        self.clusters.as_ref()
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn residual(&self, beta: &[f64]) -> Result<DVector<f64>> {
        if beta.len() != self.p() {
            return Err(Error::DimensionMismatch(format!(
                "beta has {} entries, model has p = {}",
                beta.len(),
                self.p()
            )));
        }
        Ok(&self.y - &self.x * DVector::from_column_slice(beta))
    }

    /// Orthonormal factor of Z: the instrument projector P_Z.
    pub fn instrument_projector(&self) -> Result<Projector> {
        Projector::from_matrix(&self.z)
    }
}

/// Replace y, X, Z by their residuals from a regression on F.
pub fn partial_out_controls(m: &LinearIVModel) -> Result<LinearIVModel> {
    let f = match m.controls() {
        Some(f) if f.ncols() > 0 => f,
        _ => {
            let mut out = m.clone();
            out.f = None;
            return Ok(out);
        }
    };
    let q = f.ncols();
    if q >= m.n() {
        return Err(Error::InvalidInput(format!("{q} controls for {} observations", m.n())));
    }
    let (qf, _, _) = linalg::thin_svd(f)
        .map_err(|_| Error::InvalidInput("control columns are collinear".into()))?;
    let annihilate = |a: &DMatrix<f64>| a - &qf * qf.tr_mul(a);
    let y = {
        let ym = DMatrix::from_column_slice(m.n(), 1, m.y.as_slice());
        DVector::from_column_slice(annihilate(&ym).as_slice())
    };
    let x = annihilate(&m.x);
    let z = annihilate(&m.z);
    if linalg::rank(&z) < m.k() {
        return Err(Error::ControlRankLoss);
    }
    Ok(LinearIVModel { y, x, z, f: None, clusters: m.clusters.clone() })
}

/// G = D_eps Z at the given beta.
pub fn linear_iv_moments(m: &LinearIVModel, beta: &[f64]) -> Result<MomentSet> {
    let eps = m.residual(beta)?;
    if eps.iter().all(|&e| e == 0.0) {
        return Err(Error::ZeroMoments);
    }
    MomentSet::new(linalg::scale_rows(&m.z, &eps), beta.to_vec())
}

/// Run several tests at the same beta, sharing the factorisations between
/// them. Controls, if any, are partialled out first. One entry per method,
/// in order.
pub fn run_methods(m: &LinearIVModel, beta: &[f64], methods: &[Method], alpha: f64) -> Vec<Result<TestResult>> {
    let owned;
    let m = if m.controls().is_some() {
        match partial_out_controls(m) {
            Ok(pm) => {
                owned = pm;
                &owned
            }
            Err(e) => return methods.iter().map(|_| Err(e.clone())).collect(),
        }
    } else {
        m
    };
    let wp = std::cell::OnceCell::new();
    let wp = || wp.get_or_init(|| weighting_projector(m, beta)).as_ref().map_err(Clone::clone);
    let pz = std::cell::OnceCell::new();
    let pz = || pz.get_or_init(|| m.instrument_projector()).as_ref().map_err(Clone::clone);
    let scores = std::cell::OnceCell::new();
    let scores = || {
        scores
            .get_or_init(|| {
                let w = wp()?;
                let (s, var) = score_and_variance(w, m.x());
                let (fixed, mi) = score_tests_from(&s, &var, m.n(), m.k(), alpha);
                Ok::<_, Error>((fixed, mi.with_diag("max_pii", w.p_diag().max())))
            })
            .clone()
    };
    let clusters = || {
        m.clusters()
            .ok_or_else(|| Error::InvalidInput("cluster methods need a cluster map".into()))
    };
    methods
        .iter()
        .map(|&method| -> Result<TestResult> {
            check_alpha(alpha)?;
            if beta.len() != m.p() {
                return Err(Error::DimensionMismatch(format!(
                    "beta has {} entries, model has p = {}",
                    beta.len(),
                    m.p()
                )));
            }
            match method {
                Method::MiAR => mi_ar_from_projector(&wp()?.moment_projector(), alpha, method),
                Method::FixedKAR => fixed_k_from_projector(&wp()?.moment_projector(), alpha, method),
                Method::FixedKScore => scores()?.0,
                Method::MiScore => Ok(scores()?.1),
                Method::ClusterMiAR => crate::cluster::cluster_mi_ar_test(&linear_iv_moments(m, beta)?, clusters()?, alpha),
                Method::ClusterFixedKAR => {
                    crate::cluster::cluster_fixed_k_ar_test(&linear_iv_moments(m, beta)?, clusters()?, alpha)
                }
                Method::JackknifeAR => jackknife::jackknife_ar_from(pz()?, &m.residual(beta)?, None, alpha),
                Method::ClusterJackknifeAR => {
                    jackknife::jackknife_ar_from(pz()?, &m.residual(beta)?, Some(clusters()?), alpha)
                }
                Method::JackknifeScore => jackknife::jackknife_score_from(pz()?, m.x(), &m.residual(beta)?, alpha),
                Method::HfulT => {
                    let fit = hful::hful_from(pz()?, m.y(), m.x(), HFUL_C)?;
                    hful::hful_t_result(&fit, beta[0], alpha, m.n(), m.k())
                }
                Method::ChExact => Err(Error::InvalidInput("ch-exact applies to quantile IV data only".into())),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, k: usize, p: usize, seed: u64) -> LinearIVModel {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let z = DMatrix::from_fn(n, k, |_, _| next());
        let x = DMatrix::from_fn(n, p, |_, _| next());
        let y = DVector::from_fn(n, |_, _| next());
        LinearIVModel::new(y, x, z).unwrap()
    }

    #[test]
    fn no_controls_is_identity() {
        let m = toy(20, 3, 1, 1);
        let out = partial_out_controls(&m.clone().with_controls(DMatrix::zeros(20, 0)).unwrap()).unwrap();
        assert_eq!(out.z(), m.z());
        assert_eq!(out.y(), m.y());
    }

    #[test]
    fn constant_control_demeans() {
        let m = toy(15, 2, 1, 2).with_controls(DMatrix::from_element(15, 1, 1.0)).unwrap();
        let out = partial_out_controls(&m).unwrap();
        let ybar = m.y().mean();
        for i in 0..15 {
            assert!((out.y()[i] - (m.y()[i] - ybar)).abs() < 1e-12);
        }
        for j in 0..2 {
            assert!(out.z().column(j).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn annihilator_is_idempotent() {
        let base = toy(50, 4, 2, 3);
        let f = toy(50, 3, 1, 4).z().clone();
        let once = partial_out_controls(&base.clone().with_controls(f.clone()).unwrap()).unwrap();
        let twice = partial_out_controls(&once.clone().with_controls(f).unwrap()).unwrap();
        assert!((once.z() - twice.z()).amax() < 1e-10);
        assert!((once.x() - twice.x()).amax() < 1e-10);
        assert!((once.y() - twice.y()).amax() < 1e-10);
    }

    #[test]
    fn control_inside_instrument_span_loses_rank() {
        let base = toy(30, 3, 1, 5);
        let f = base.z().columns(0, 1).into_owned();
        let m = base.with_controls(f).unwrap();
        assert_eq!(partial_out_controls(&m).unwrap_err(), Error::ControlRankLoss);
    }

    #[test]
    fn unit_residual_gives_z() {
        let z = DMatrix::from_fn(6, 2, |i, j| (i as f64 + 1.0).powi(j as i32 + 1));
        let x = DMatrix::from_element(6, 1, 0.0);
        let y = DVector::from_element(6, 1.0);
        let m = LinearIVModel::new(y, x, z.clone()).unwrap();
        assert_eq!(linear_iv_moments(&m, &[3.0]).unwrap().g(), &z);
    }

    #[test]
    fn exact_fit_has_zero_moments() {
        let x = DMatrix::from_fn(6, 1, |i, _| i as f64);
        let y = DVector::from_fn(6, |i, _| 2.0 * i as f64);
        let z = DMatrix::from_fn(6, 2, |i, j| (i as f64 + 1.0).powi(j as i32));
        let m = LinearIVModel::new(y, x, z).unwrap();
        assert_eq!(linear_iv_moments(&m, &[2.0]).unwrap_err(), Error::ZeroMoments);
    }
}
