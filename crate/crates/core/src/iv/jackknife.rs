//! Jackknife AR and score baselines built on the zero-diagonal instrument
//! projector.

use nalgebra::{DMatrix, DVector};

use super::LinearIVModel;
use crate::ar::{check_alpha, mi_ar_critical, mi_ar_p_value, Method, Projector, TestResult};
use crate::cluster::ClusterMap;
use crate::dist::{chi2_quantile, chi2_sf};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, spd_inverse};

/// (P - D_P) v
pub(crate) fn dot_apply(pz: &Projector, v: &DVector<f64>) -> DVector<f64> {
    pz.apply(v) - pz.diag().component_mul(v)
}

/// Q' D_b Q for the projector factor Q.
fn weighted_gram(pz: &Projector, b: &DVector<f64>) -> DMatrix<f64> {
    let q = pz.factor();
    let mut qb = q.clone();
    for (i, mut row) in qb.row_iter_mut().enumerate() {
        row *= b[i];
    }
    q.tr_mul(&qb)
}

/// sum_{i != j} b1_i P_ij^2 b2_j in O(n k^2).
pub(crate) fn hadamard_quad(pz: &Projector, b1: &DVector<f64>, b2: &DVector<f64>) -> f64 {
    let full = weighted_gram(pz, b1).dot(&weighted_gram(pz, b2));
    let d = pz.diag();
    let diag: f64 = (0..d.len()).map(|i| d[i] * d[i] * b1[i] * b2[i]).sum();
    full - diag
}

/// Numerator and variance of the jackknife AR, optionally zeroing whole
/// within-cluster blocks instead of just the diagonal.
pub(crate) fn jackknife_ar_parts(
    pz: &Projector,
    eps: &DVector<f64>,
    clusters: Option<&ClusterMap>,
) -> (f64, f64) {
    let e2 = eps.component_mul(eps);
    let mut num = pz.bilinear(eps, eps);
    let mut var = weighted_gram(pz, &e2).norm_squared();
    match clusters {
        None => {
            let d = pz.diag();
            for i in 0..eps.len() {
                num -= d[i] * e2[i];
                var -= d[i] * d[i] * e2[i] * e2[i];
            }
        }
        Some(c) => {
            for members in c.members() {
                for &i in &members {
                    for &j in &members {
                        let pij = pz.entry(i, j);
                        num -= eps[i] * pij * eps[j];
                        var -= e2[i] * pij * pij * e2[j];
                    }
                }
            }
        }
    }
    (num, 2.0 * var)
}

pub(crate) fn jackknife_ar_from(
    pz: &Projector,
    eps: &DVector<f64>,
    clusters: Option<&ClusterMap>,
    alpha: f64,
) -> Result<TestResult> {
    check_alpha(alpha)?;
    let (num, var) = jackknife_ar_parts(pz, eps, clusters);
    if !(var >= 1e-12) {
        return Err(Error::DegenerateVariance { value: var });
    }
    let k = pz.k();
    let stat = num / var.sqrt();
    let method = if clusters.is_some() { Method::ClusterJackknifeAR } else { Method::JackknifeAR };
    let mut r = TestResult::one_sided(method, stat, mi_ar_critical(k, alpha), mi_ar_p_value(stat, k), alpha, pz.n(), k);
    r.h = clusters.map(|c| c.h());
    Ok(r)
}

pub fn jackknife_ar_test(m: &LinearIVModel, beta: &[f64], alpha: f64) -> Result<TestResult> {
    let eps = m.residual(beta)?;
    jackknife_ar_from(&m.instrument_projector()?, &eps, None, alpha)
}

pub fn cluster_jackknife_ar_test(m: &LinearIVModel, beta: &[f64], alpha: f64) -> Result<TestResult> {
    let c = m
        .clusters()
        .ok_or_else(|| Error::InvalidInput("cluster jackknife needs a cluster map".into()))?;
    let eps = m.residual(beta)?;
    jackknife_ar_from(&m.instrument_projector()?, &eps, Some(c), alpha)
}

pub(crate) fn jackknife_score_from(
    pz: &Projector,
    x: &DMatrix<f64>,
    eps: &DVector<f64>,
    alpha: f64,
) -> Result<TestResult> {
    check_alpha(alpha)?;
    let p = x.ncols();
    let n = x.nrows();
    let pdot_x: Vec<DVector<f64>> = (0..p).map(|l| dot_apply(pz, &x.column(l).into_owned())).collect();
    let s = DVector::from_fn(p, |l, _| pdot_x[l].dot(eps));
    let ex: Vec<DVector<f64>> = (0..p).map(|l| x.column(l).component_mul(eps)).collect();
    let e2 = eps.component_mul(eps);
    let mut omega = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let first = pdot_x[a].component_mul(&e2).dot(&pdot_x[b]);
            let v = first + hadamard_quad(pz, &ex[a], &ex[b]);
            omega[(a, b)] = v;
            omega[(b, a)] = v;
        }
    }
    let inv = spd_inverse(&omega).ok_or(Error::NonPdVariance { min_eig: min_eigenvalue(&omega) })?;
    let stat = (s.transpose() * inv * &s)[(0, 0)];
    let crit = chi2_quantile(1.0 - alpha, p as f64);
    let mut r = TestResult::one_sided(Method::JackknifeScore, stat, crit, chi2_sf(stat, p as f64), alpha, n, pz.k());
    r.p = Some(p);
    Ok(r)
}

pub fn jackknife_score_test(m: &LinearIVModel, beta: &[f64], alpha: f64) -> Result<TestResult> {
    let eps = m.residual(beta)?;
    jackknife_score_from(&m.instrument_projector()?, m.x(), &eps, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_obs(eps: [f64; 2]) -> LinearIVModel {
        LinearIVModel::new(
            DVector::from_column_slice(&eps),
            DMatrix::zeros(2, 1),
            DMatrix::from_element(2, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn hand_evaluated_two_by_two() {
        let r = jackknife_ar_test(&two_obs([1.0, 1.0]), &[0.0], 0.05).unwrap();
        assert!((r.statistic - 1.0).abs() < 1e-12);
        let r = jackknife_ar_test(&two_obs([1.0, -1.0]), &[0.0], 0.05).unwrap();
        assert!((r.statistic + 1.0).abs() < 1e-12);
        assert!(!r.reject);
    }

    fn dense_check(n: usize, k: usize, sizes: &[usize]) {
        let z = DMatrix::from_fn(n, k, |i, j| ((i * 7 + j * 3) % 5) as f64 + (i as f64 * 0.37).sin());
        let eps = DVector::from_fn(n, |i, _| (i as f64 * 1.3).cos() + 0.2);
        let pz = Projector::from_matrix(&z).unwrap();
        let c = ClusterMap::from_sizes(sizes).unwrap();
        let mut pd = pz.dense();
        for i in 0..n {
            for j in 0..n {
                if c.assignment()[i] == c.assignment()[j] {
                    pd[(i, j)] = 0.0;
                }
            }
        }
        let num = (eps.transpose() * &pd * &eps)[(0, 0)];
        let e2 = eps.component_mul(&eps);
        let had = pd.component_mul(&pd);
        let var = 2.0 * (e2.transpose() * had * &e2)[(0, 0)];
        let (a, b) = jackknife_ar_parts(&pz, &eps, Some(&c));
        assert!((a - num).abs() < 1e-10 && (b - var).abs() < 1e-10);
    }

    #[test]
    fn cluster_blocks_match_dense_zeroing() {
        dense_check(4, 1, &[2, 2]);
        dense_check(9, 2, &[3, 1, 4, 1]);
    }

    #[test]
    fn singleton_clusters_reduce_to_diagonal() {
        let n = 10;
        let z = DMatrix::from_fn(n, 3, |i, j| ((i + 1) as f64).powf(0.5 + j as f64 * 0.3));
        let eps = DVector::from_fn(n, |i, _| (i as f64).sin() + 0.1);
        let pz = Projector::from_matrix(&z).unwrap();
        let a = jackknife_ar_parts(&pz, &eps, None);
        let b = jackknife_ar_parts(&pz, &eps, Some(&ClusterMap::singletons(n)));
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn scalar_jackknife_score_matches_dense() {
        let n = 12;
        let z = DMatrix::from_fn(n, 3, |i, j| ((i * 5 + j) % 7) as f64 - 3.0 + 0.1 * i as f64);
        let x = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.7).sin());
        let eps = DVector::from_fn(n, |i, _| (i as f64 * 0.3).cos());
        let pz = Projector::from_matrix(&z).unwrap();
        let mut pd = pz.dense();
        for i in 0..n {
            pd[(i, i)] = 0.0;
        }
        let xv = x.column(0).into_owned();
        let sj = (xv.transpose() * &pd * &eps)[(0, 0)];
        let mut om = 0.0;
        let pdx = &pd * &xv;
        for i in 0..n {
            om += pdx[i] * pdx[i] * eps[i] * eps[i];
            for j in 0..n {
                if i != j {
                    om += xv[i] * pd[(i, j)] * eps[i] * eps[j] * pd[(j, i)] * xv[j];
                }
            }
        }
        let r = jackknife_score_from(&pz, &x, &eps, 0.05).unwrap();
        assert!((r.statistic - sj * sj / om).abs() < 1e-10 * (1.0 + r.statistic));
    }
}
