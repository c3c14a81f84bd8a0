use nalgebra::{DMatrix, DVector};

use super::weighting::{weighting_projector, WeightingProjector};
use super::LinearIVModel;
use crate::ar::{check_alpha, Method, TestResult};
use crate::dist::{chi2_quantile, chi2_sf};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, spd_inverse, sym_pinv, symmetrize};

/// Above this many observations V is never materialised.
pub const DENSE_LIMIT: usize = 2000;

/// Estimated joint variance of ((AR - k)/sqrt(k), sqrt(n) S).
#[derive(Debug, Clone)]
pub struct ScoreVariance {
    pub sigma_sq: f64,
    pub omega_l: DMatrix<f64>,
    pub omega_h: DMatrix<f64>,
    pub cov_ar_score: DVector<f64>,
    pub assembled: DMatrix<f64>,
    /// Whether omega_l + omega_h is positive definite.
    pub pd_flag: bool,
    pub min_eig: f64,
}

impl ScoreVariance {
    pub fn omega(&self) -> DMatrix<f64> {
        &self.omega_l + &self.omega_h
    }
}

/// (I - D_{P iota}) X
fn leverage_adjusted(wp: &WeightingProjector, x: &DMatrix<f64>) -> DMatrix<f64> {
    let pi = wp.p_iota();
    let mut xt = x.clone();
    for (i, mut row) in xt.row_iter_mut().enumerate() {
        row *= 1.0 - pi[i];
    }
    xt
}

/// S = -(1/n) X'(I - D_{P iota}) V eps.
fn score_from(wp: &WeightingProjector, x: &DMatrix<f64>) -> DVector<f64> {
    let n = wp.n() as f64;
    let veps = wp.v_apply(wp.eps());
    leverage_adjusted(wp, x).tr_mul(&veps) / -n
}

pub fn cu_score(m: &LinearIVModel, beta: &[f64]) -> Result<DVector<f64>> {
    let wp = weighting_projector(m, beta)?;
    Ok(score_from(&wp, m.x()))
}

/// Shared accumulation. `row(i, buf)` must fill `buf` with row i of V.
///
/// With d = diag(P), the high-dimensional block is (1/n) X'MX - (2/n) Y'Y
/// where M is the elementwise matrix below and Y = Q'D_eps X with
/// Q = V D_eps (.) V D_eps. Everything is a single pass over the rows of V.
fn accumulate<F>(wp: &WeightingProjector, x: &DMatrix<f64>, mut row: F) -> ScoreVariance
where
    F: FnMut(usize, &mut DVector<f64>),
{
    let n = wp.n();
    let k = wp.k();
    let p = x.ncols();
    let nf = n as f64;
    let eps = wp.eps();
    let d = wp.p_diag();
    let vd = wp.v_diag();

    let sigma_sq = 2.0 / k as f64 * (k as f64 - d.norm_squared());

    let wx = wp.factor().tr_mul(&leverage_adjusted(wp, x));
    let mut omega_l = wx.tr_mul(&wx) / nf;
    symmetrize(&mut omega_l);

    // Row-major copy of X for the inner loops.
    let xr: Vec<f64> = (0..n).flat_map(|i| (0..p).map(move |l| (i, l))).map(|(i, l)| x[(i, l)]).collect();
    let mut y = vec![0.0; n * p];
    let mut xmx = DMatrix::<f64>::zeros(p, p);
    let mut cvec = DVector::<f64>::zeros(n);
    let mut buf = DVector::<f64>::zeros(n);
    let mut mx = vec![0.0; p];

    for i in 0..n {
        row(i, &mut buf);
        let (ei, di) = (eps[i], d[i]);
        let xi = &xr[i * p..(i + 1) * p];
        mx.iter_mut().for_each(|v| *v = 0.0);
        let mut c = vd[i] * di * ei;
        for j in 0..n {
            let vij = buf[j];
            let pij = ei * eps[j] * vij;
            let wy = vij * vij * ei;
            let yj = &mut y[j * p..(j + 1) * p];
            for l in 0..p {
                yj[l] += wy * xi[l];
            }
            c -= vij * pij * d[j] * eps[j];
            let mij = if i == j {
                -2.0 * vd[i] * di * (1.0 - 2.0 * di)
            } else {
                let s = di + d[j];
                vij * ((di * d[j] + pij * pij) * (3.0 - 4.0 * s) - 2.0 * s + 2.0 * s * s)
                    + 2.0 * vij * pij * s
            };
            let xj = &xr[j * p..(j + 1) * p];
            for l in 0..p {
                mx[l] += mij * xj[l];
            }
        }
        cvec[i] = c;
        for a in 0..p {
            for b in 0..p {
                xmx[(a, b)] += xi[a] * mx[b];
            }
        }
    }

    let mut yty = DMatrix::<f64>::zeros(p, p);
    for m in 0..n {
        let e2 = eps[m] * eps[m];
        let ym = &y[m * p..(m + 1) * p];
        for a in 0..p {
            for b in 0..p {
                yty[(a, b)] += e2 * e2 * ym[a] * ym[b];
            }
        }
    }
    let mut omega_h = (xmx - yty * 2.0) / nf;
    symmetrize(&mut omega_h);

    let cov_ar_score = x.tr_mul(&cvec) * (2.0 / (nf * k as f64).sqrt());

    let mut assembled = DMatrix::<f64>::zeros(p + 1, p + 1);
    assembled[(0, 0)] = sigma_sq;
    for l in 0..p {
        assembled[(l + 1, 0)] = cov_ar_score[l];
        assembled[(0, l + 1)] = cov_ar_score[l];
    }
    let omega = &omega_l + &omega_h;
    assembled.view_mut((1, 1), (p, p)).copy_from(&omega);
    let min_eig = min_eigenvalue(&omega);

    ScoreVariance {
        sigma_sq,
        omega_l,
        omega_h,
        cov_ar_score,
        assembled,
        pd_flag: min_eig > 0.0,
        min_eig,
    }
}

/// Materialises V = WW' once and reads its columns.
pub fn variance_estimator_dense(wp: &WeightingProjector, x: &DMatrix<f64>) -> ScoreVariance {
    let v = wp.dense_v();
    accumulate(wp, x, |i, buf| buf.copy_from(&v.column(i)))
}

/// Recomputes each row of V from the n x k factor; O(n) extra memory.
pub fn variance_estimator_streaming(wp: &WeightingProjector, x: &DMatrix<f64>) -> ScoreVariance {
    let w = wp.factor();
    accumulate(wp, x, |i, buf| {
        let wi = w.row(i).transpose();
        buf.gemv(1.0, w, &wi, 0.0);
    })
}

fn estimate(wp: &WeightingProjector, x: &DMatrix<f64>) -> ScoreVariance {
    if wp.n() <= DENSE_LIMIT {
        variance_estimator_dense(wp, x)
    } else {
        variance_estimator_streaming(wp, x)
    }
}

pub fn variance_estimator(m: &LinearIVModel, beta: &[f64]) -> Result<ScoreVariance> {
    let wp = weighting_projector(m, beta)?;
    Ok(estimate(&wp, m.x()))
}

/// Score and its variance estimate from one weighting factorisation.
pub fn score_and_variance(
    wp: &WeightingProjector,
    x: &DMatrix<f64>,
) -> (DVector<f64>, ScoreVariance) {
    (score_from(wp, x), estimate(wp, x))
}

fn quad_form(s: &DVector<f64>, inv: &DMatrix<f64>) -> f64 {
    (s.transpose() * inv * s)[(0, 0)]
}

fn score_result(method: Method, stat: f64, p: usize, n: usize, k: usize, alpha: f64) -> TestResult {
    let crit = chi2_quantile(1.0 - alpha, p as f64);
    let mut r = TestResult::one_sided(method, stat, crit, chi2_sf(stat, p as f64), alpha, n, k);
    r.p = Some(p);
    r
}

/// Fixed-k and MI score tests from a precomputed score and variance.
/// The fixed-k test fails when its variance is not positive definite; the MI
/// test falls back to a pseudo-inverse and flags it.
pub fn score_tests_from(
    s: &DVector<f64>,
    var: &ScoreVariance,
    n: usize,
    k: usize,
    alpha: f64,
) -> (Result<TestResult>, TestResult) {
    let p = s.len();
    let nf = n as f64;

    let fixed = match spd_inverse(&var.omega_l) {
        Some(inv) => Ok(score_result(Method::FixedKScore, nf * quad_form(s, &inv), p, n, k, alpha)),
        None => Err(Error::NonPdVariance { min_eig: min_eigenvalue(&var.omega_l) }),
    };

    let omega = var.omega();
    let inv = if var.pd_flag {
        spd_inverse(&omega).unwrap_or_else(|| sym_pinv(&omega))
    } else {
        sym_pinv(&omega)
    };
    let mi = score_result(Method::MiScore, nf * quad_form(s, &inv), p, n, k, alpha)
        .with_diag("pd_flag", if var.pd_flag { 1.0 } else { 0.0 })
        .with_diag("min_eig", var.min_eig)
        .with_diag("sigma_sq", var.sigma_sq);
    (fixed, mi)
}

pub fn mi_score_test(m: &LinearIVModel, beta: &[f64], alpha: f64) -> Result<TestResult> {
    check_alpha(alpha)?;
    let wp = weighting_projector(m, beta)?;
    let (s, var) = score_and_variance(&wp, m.x());
    let max_pii = wp.p_diag().max();
    Ok(score_tests_from(&s, &var, m.n(), m.k(), alpha).1.with_diag("max_pii", max_pii))
}

pub fn fixed_k_score_test(m: &LinearIVModel, beta: &[f64], alpha: f64) -> Result<TestResult> {
    check_alpha(alpha)?;
    let wp = weighting_projector(m, beta)?;
    let s = score_from(&wp, m.x());
    let wx = wp.factor().tr_mul(&leverage_adjusted(&wp, m.x()));
    let omega_l = wx.tr_mul(&wx) / m.n() as f64;
    let inv = spd_inverse(&omega_l).ok_or(Error::NonPdVariance { min_eig: min_eigenvalue(&omega_l) })?;
    Ok(score_result(Method::FixedKScore, m.n() as f64 * quad_form(&s, &inv), m.p(), m.n(), m.k(), alpha))
}
