use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::weighting::WeightingProjector;
use crate::error::{Error, Result};
use crate::linalg::symmetrize;

/// A fixed design for the conditional variance of the score under the null.
///
/// Given signs r, the regressors are x_i = zbar_i + r_i eps_i a_i + u_i with
/// u_i ~ N(0, sigma_u[i]) and the residuals are r_i eps_i.
#[derive(Debug, Clone)]
pub struct PopulationDesign {
    pub z: DMatrix<f64>,
    pub eps: DVector<f64>,
    /// Z Pi, n x p.
    pub zbar: DMatrix<f64>,
    /// Regression of the first-stage error on eps, n x p.
    pub a: DMatrix<f64>,
    /// Per-observation p x p covariance of the remaining first-stage error.
    pub sigma_u: Vec<DMatrix<f64>>,
}

impl PopulationDesign {
    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn p(&self) -> usize {
        self.zbar.ncols()
    }

    fn check(&self) -> Result<()> {
        let (n, p) = (self.n(), self.p());
        let ok = self.eps.len() == n
            && self.zbar.nrows() == n
            && self.a.shape() == (n, p)
            && self.sigma_u.len() == n
            && self.sigma_u.iter().all(|s| s.shape() == (p, p));
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("population design blocks disagree in size".into()))
        }
    }

    /// One draw of (X, r (.) eps).
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.p();
        let chol: Vec<DMatrix<f64>> = self
            .sigma_u
            .iter()
            .map(|s| s.clone().cholesky().map(|c| c.l()).unwrap_or_else(|| DMatrix::zeros(p, p)))
            .collect();
        self.draw_with(rng, &chol)
    }

    /// As [`draw`](Self::draw) with the Cholesky factors of `sigma_u` supplied.
    pub fn draw_with<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        chol: &[DMatrix<f64>],
    ) -> (DMatrix<f64>, DVector<f64>) {
        let (n, p) = (self.n(), self.p());
        let mut x = self.zbar.clone();
        let mut er = self.eps.clone();
        let mut xi = DVector::<f64>::zeros(p);
        for i in 0..n {
            if rng.random::<bool>() {
                er[i] = -er[i];
            }
            for l in 0..p {
                xi[l] = rng.sample(StandardNormal);
            }
            let u = &chol[i] * &xi;
            for l in 0..p {
                x[(i, l)] += er[i] * self.a[(i, l)] + u[l];
            }
        }
        (x, er)
    }
}

/// Population counterpart of the score variance estimator, split by source.
#[derive(Debug, Clone)]
pub struct PopulationVariance {
    pub sigma_sq: f64,
    pub omega_l_z: DMatrix<f64>,
    pub omega_l_a: DMatrix<f64>,
    pub omega_l_u: DMatrix<f64>,
    pub omega_h_z: DMatrix<f64>,
    pub omega_h_a: DMatrix<f64>,
    pub omega_h_u: DMatrix<f64>,
    pub omega_l: DMatrix<f64>,
    pub omega_h: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub cov: DVector<f64>,
    /// The n x n matrix V (.) W that carries the z-part of omega_h.
    pub w_dot_v: DMatrix<f64>,
    pub assembled: DMatrix<f64>,
}

fn sandwich(a: &DMatrix<f64>, m: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * m * b
}

pub fn population_score_variance(design: &PopulationDesign) -> Result<PopulationVariance> {
    design.check()?;
    let (n, p) = (design.n(), design.p());
    let k = design.z.ncols();
    let nf = n as f64;
    let eps = &design.eps;

    let wp = WeightingProjector::new(&design.z, eps)?;
    let v = wp.dense_v();
    let pm = wp.dense_p();
    let d = wp.p_diag().clone();
    let vd = wp.v_diag().clone();
    let pp = pm.component_mul(&pm);

    // q_im = V_im^2 eps_m^2
    let q = DMatrix::from_fn(n, n, |i, m| v[(i, m)] * v[(i, m)] * eps[m] * eps[m]);

    let mut sigma_off = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sigma_off += pp[(i, j)];
            }
        }
    }
    let sigma_sq = 2.0 / k as f64 * sigma_off;

    // z part, limited
    let lz = DMatrix::from_fn(n, n, |i, j| {
        let mut val = (1.0 - d[i]) * v[(i, j)] * (1.0 - d[j]) + v[(i, j)] * pp[(i, j)];
        if i == j {
            val += d[i] * vd[i] * (1.0 - 2.0 * d[i]);
        }
        val
    });
    let dp_minus_pp = DMatrix::from_fn(n, n, |i, j| if i == j { d[i] } else { 0.0 } - pp[(i, j)]);

    let w_dot_v = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            let mut t = 0.0;
            for m in 0..n {
                t += q[(i, m)] * pp[(i, m)];
            }
            -2.0 * vd[i] * d[i] * (1.0 - 2.0 * d[i]) - 2.0 * t
        } else {
            let (di, dj, pij) = (d[i], d[j], pm[(i, j)]);
            let s = di + dj;
            v[(i, j)] * ((di * dj + pij * pij) * (3.0 - 4.0 * s) - 2.0 * s + 2.0 * s * s)
        }
    });

    // Diagonal weights for the u parts.
    let lu_w: Vec<f64> = (0..n).map(|i| vd[i] * (1.0 - d[i])).collect();
    let hu_w: Vec<f64> = (0..n)
        .map(|i| {
            let mut t = q[(i, i)] * (1.0 - 2.0 * d[i]);
            for m in 0..n {
                t += q[(i, m)] * pp[(m, i)];
            }
            t
        })
        .collect();
    let u_part = |w: &[f64]| {
        DMatrix::from_fn(p, p, |l1, l2| (0..n).map(|i| w[i] * design.sigma_u[i][(l1, l2)]).sum::<f64>())
    };

    let zb = &design.zbar;
    let a = &design.a;
    let omega_l_z = sandwich(zb, &lz, zb) / nf;
    let omega_l_a = sandwich(a, &dp_minus_pp, a) / nf;
    let omega_l_u = u_part(&lu_w) / nf;
    let omega_h_z = sandwich(zb, &w_dot_v, zb) / nf;
    let omega_h_a = sandwich(a, &(&dp_minus_pp * &dp_minus_pp), a) * (-2.0 / nf);
    let omega_h_u = u_part(&hu_w) * (-2.0 / nf);

    let mut omega_l = &omega_l_z + &omega_l_a + &omega_l_u;
    let mut omega_h = &omega_h_z + &omega_h_a + &omega_h_u;
    symmetrize(&mut omega_l);
    symmetrize(&mut omega_h);
    let omega = &omega_l + &omega_h;

    // cov_l = 2/sqrt(nk) sum_i Psi_ii P_ii with Psi = (I - P) D_a P.
    let scale = 2.0 / (nf * k as f64).sqrt();
    let cov = DVector::from_fn(p, |l, _| {
        let mut acc = 0.0;
        for i in 0..n {
            let mut psi = a[(i, l)] * d[i];
            for m in 0..n {
                psi -= pp[(i, m)] * a[(m, l)];
            }
            acc += psi * d[i];
        }
        scale * acc
    });

    let mut assembled = DMatrix::zeros(p + 1, p + 1);
    assembled[(0, 0)] = sigma_sq;
    for l in 0..p {
        assembled[(0, l + 1)] = cov[l];
        assembled[(l + 1, 0)] = cov[l];
    }
    assembled.view_mut((1, 1), (p, p)).copy_from(&omega);

    Ok(PopulationVariance {
        sigma_sq,
        omega_l_z,
        omega_l_a,
        omega_l_u,
        omega_h_z,
        omega_h_a,
        omega_h_u,
        omega_l,
        omega_h,
        omega,
        cov,
        w_dot_v,
        assembled,
    })
}
