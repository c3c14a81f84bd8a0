use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::jackknife::{dot_apply, hadamard_quad};
use super::LinearIVModel;
use crate::ar::{check_alpha, Method, Projector, TestResult};
use crate::dist::{normal_cdf, normal_quantile};
use crate::error::{Error, Result};
use crate::linalg::symmetrize;

/// Fuller constant used by the estimator.
pub const HFUL_C: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct HfulFit {
    pub beta: DVector<f64>,
    pub alpha_tilde: f64,
    pub alpha_hat: f64,
    pub vcov: DMatrix<f64>,
    pub se: DVector<f64>,
}

/// Smallest root of det(A - lambda B) = 0 for symmetric A and SPD B.
pub(crate) fn min_generalized_eigenvalue(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let l = b.clone().cholesky()?.l();
    let linv = l.try_inverse()?;
    let mut c = &linv * a * linv.transpose();
    symmetrize(&mut c);
    Some(SymmetricEigen::new(c).eigenvalues.min())
}

/// beta = (X'PX - a X'X)^{-1}(X'Py - a X'y) from the blocks of the
/// (p + 1) x (p + 1) matrices A = Xbar'P Xbar and B = Xbar'Xbar.
fn fuller_beta(a: &DMatrix<f64>, b: &DMatrix<f64>, alpha_hat: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = a.nrows() - 1;
    let h = a.view((1, 1), (p, p)) - b.view((1, 1), (p, p)) * alpha_hat;
    let rhs = a.view((1, 0), (p, 1)) - b.view((1, 0), (p, 1)) * alpha_hat;
    let hinv = h
        .try_inverse()
        .ok_or_else(|| Error::SingularHful("X'P X - alpha X'X is singular".into()))?;
    let beta = DVector::from_column_slice((&hinv * rhs).as_slice());
    Ok((beta, hinv))
}

pub(crate) fn hful_from(pz: &Projector, y: &DVector<f64>, x: &DMatrix<f64>, c_hful: f64) -> Result<HfulFit> {
    let (n, p) = (x.nrows(), x.ncols());
    let mut xbar = DMatrix::zeros(n, p + 1);
    xbar.set_column(0, y);
    xbar.view_mut((0, 1), (n, p)).copy_from(x);
    let pdot = DMatrix::from_columns(
        &(0..=p).map(|j| dot_apply(pz, &xbar.column(j).into_owned())).collect::<Vec<_>>(),
    );
    let mut a = xbar.tr_mul(&pdot);
    symmetrize(&mut a);
    let b = xbar.tr_mul(&xbar);

    let alpha_tilde = min_generalized_eigenvalue(&a, &b)
        .ok_or_else(|| Error::SingularHful("(y, X) is rank deficient".into()))?;
    let shrink = (1.0 - alpha_tilde) * c_hful / n as f64;
    let alpha_hat = (alpha_tilde - shrink) / (1.0 - shrink);

    let (beta, hinv) = fuller_beta(&a, &b, alpha_hat)?;

    let ehat = y - x * &beta;
    let ee = ehat.norm_squared();
    if ee <= 0.0 {
        return Err(Error::SingularHful("residuals are identically zero".into()));
    }
    let gamma = x.tr_mul(&ehat) / ee;
    let xhat = x - &ehat * gamma.transpose();

    let pxh: Vec<DVector<f64>> = (0..p).map(|l| dot_apply(pz, &xhat.column(l).into_owned())).collect();
    let ex: Vec<DVector<f64>> = (0..p).map(|l| xhat.column(l).component_mul(&ehat)).collect();
    let e2 = ehat.component_mul(&ehat);
    let mut sigma = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let v = pxh[i].component_mul(&e2).dot(&pxh[j]) + hadamard_quad(pz, &ex[i], &ex[j]);
            sigma[(i, j)] = v;
            sigma[(j, i)] = v;
        }
    }
    let mut vcov = &hinv * sigma * &hinv;
    symmetrize(&mut vcov);
    let se = DVector::from_fn(p, |i, _| vcov[(i, i)].max(0.0).sqrt());
    Ok(HfulFit { beta, alpha_tilde, alpha_hat, vcov, se })
}

pub fn hful_estimate(m: &LinearIVModel) -> Result<HfulFit> {
    hful_from(&m.instrument_projector()?, m.y(), m.x(), HFUL_C)
}

pub(crate) fn hful_t_result(fit: &HfulFit, beta0: f64, alpha: f64, n: usize, k: usize) -> Result<TestResult> {
    check_alpha(alpha)?;
    if !(fit.se[0] > 0.0) {
        return Err(Error::SingularHful("zero standard error".into()));
    }
    let t = (fit.beta[0] - beta0) / fit.se[0];
    let crit = normal_quantile(1.0 - alpha / 2.0);
    let pval = 2.0 * (1.0 - normal_cdf(t.abs()));
    let mut r = TestResult::one_sided(Method::HfulT, t.abs(), crit, pval, alpha, n, k)
        .with_diag("t", t)
        .with_diag("beta_hat", fit.beta[0])
        .with_diag("se", fit.se[0])
        .with_diag("alpha_tilde", fit.alpha_tilde);
    r.p = Some(fit.beta.len());
    Ok(r)
}

/// Two-sided t-test of the first coefficient against `beta0[0]`.
pub fn hful_test(m: &LinearIVModel, beta0: &[f64], alpha: f64) -> Result<TestResult> {
    if beta0.len() != m.p() {
        return Err(Error::DimensionMismatch(format!("beta has {} entries, p = {}", beta0.len(), m.p())));
    }
    let fit = hful_estimate(m)?;
    hful_t_result(&fit, beta0[0], alpha, m.n(), m.k())
}
