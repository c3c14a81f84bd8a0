use nalgebra::{DMatrix, DVector};

use super::LinearIVModel;
use crate::ar::Projector;
use crate::cluster::ClusterMap;
use crate::error::{Error, Result};
use crate::linalg::{self, scale_rows};

/// V = Z (Z'D_eps^2 Z)^{-1} Z' stored as V = W W'.
///
/// With G = D_eps Z the CU projector is P = D_eps V D_eps = U U' where
/// U = D_eps W, so both matrices share the same n x k factor.
#[derive(Debug, Clone)]
pub struct WeightingProjector {
    w: DMatrix<f64>,
    eps: DVector<f64>,
    vdiag: DVector<f64>,
    pdiag: DVector<f64>,
}

impl WeightingProjector {
    /// Build from instruments and residuals directly.
    pub fn new(z: &DMatrix<f64>, eps: &DVector<f64>) -> Result<Self> {
        let k = z.ncols();
        let g = scale_rows(z, eps);
        let (_, s, vt) = match linalg::thin_svd(&g) {
            Ok(f) => f,
            Err(_) => {
                let rank = linalg::rank(z);
                return Err(if rank < k {
                    Error::MomentRankDeficient { rank, k }
                } else {
                    Error::SingularWeighting
                });
            }
        };
        // W = Z Vt' S^{-1}
        let mut w = z * vt.transpose();
        for (j, mut col) in w.column_iter_mut().enumerate() {
            col /= s[j];
        }
        Ok(Self::from_factor(w, eps.clone()))
    }

    fn from_factor(w: DMatrix<f64>, eps: DVector<f64>) -> Self {
        let vdiag = DVector::from_iterator(w.nrows(), w.row_iter().map(|r| r.norm_squared()));
        let pdiag = vdiag.component_mul(&eps.component_mul(&eps));
        WeightingProjector { w, eps, vdiag, pdiag }
    }

    /// Same V with residual signs flipped by `r`; V does not change.
    pub fn with_signs(&self, r: &[f64]) -> Self {
        let eps = DVector::from_iterator(self.n(), self.eps.iter().zip(r).map(|(e, s)| e * s));
        WeightingProjector { w: self.w.clone(), eps, vdiag: self.vdiag.clone(), pdiag: self.pdiag.clone() }
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn eps(&self) -> &DVector<f64> {
        &self.eps
    }

    /// Diagonal of V.
    pub fn v_diag(&self) -> &DVector<f64> {
        &self.vdiag
    }

    /// Diagonal of P = D_eps V D_eps.
    pub fn p_diag(&self) -> &DVector<f64> {
        &self.pdiag
    }

    pub fn v_entry(&self, i: usize, j: usize) -> f64 {
        self.w.row(i).dot(&self.w.row(j))
    }

    pub fn p_entry(&self, i: usize, j: usize) -> f64 {
        self.eps[i] * self.eps[j] * self.v_entry(i, j)
    }

    /// V a without forming V.
    pub fn v_apply(&self, a: &DVector<f64>) -> DVector<f64> {
        &self.w * self.w.tr_mul(a)
    }

    /// P iota = D_eps V eps.
    pub fn p_iota(&self) -> DVector<f64> {
        self.v_apply(&self.eps).component_mul(&self.eps)
    }

    /// eps' V eps, which equals the AR statistic of G = D_eps Z.
    pub fn eps_v_eps(&self) -> f64 {
        self.w.tr_mul(&self.eps).norm_squared()
    }

    /// The CU projector of G = D_eps Z.
    pub fn moment_projector(&self) -> Projector {
        Projector::from_orthonormal(scale_rows(&self.w, &self.eps))
    }

    pub fn dense_v(&self) -> DMatrix<f64> {
        &self.w * self.w.transpose()
    }

    pub fn dense_p(&self) -> DMatrix<f64> {
        let u = scale_rows(&self.w, &self.eps);
        &u * u.transpose()
    }
}

pub fn weighting_projector(m: &LinearIVModel, beta: &[f64]) -> Result<WeightingProjector> {
    let eps = m.residual(beta)?;
    WeightingProjector::new(m.z(), &eps)
}

/// Clustered weighting Z (Z'B B'Z)^{-1} Z' where B'Z stacks the
/// within-cluster sums of eps_i z_i. Returned as the n x k factor W.
pub fn clustered_weighting(m: &LinearIVModel, beta: &[f64], c: &ClusterMap) -> Result<DMatrix<f64>> {
    let eps = m.residual(beta)?;
    let k = m.k();
    if c.h() <= k {
        return Err(Error::ClusterTooFew { h: c.h(), k });
    }
    let bz = c.aggregate_rows(&scale_rows(m.z(), &eps));
    let (_, s, vt) = linalg::thin_svd(&bz).map_err(|_| Error::SingularWeighting)?;
    let mut w = m.z() * vt.transpose();
    for (j, mut col) in w.column_iter_mut().enumerate() {
        col /= s[j];
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_instrument() {
        let z = DMatrix::from_element(5, 1, 1.0);
        let eps = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 1.0]);
        let s = eps.norm_squared();
        let wp = WeightingProjector::new(&z, &eps).unwrap();
        let v = wp.dense_v();
        assert!(v.iter().all(|x| (x - 1.0 / s).abs() < 1e-14));
    }

    #[test]
    fn unit_residuals_give_instrument_projector() {
        let z = DMatrix::from_fn(7, 2, |i, j| ((i + 1) as f64).powi(j as i32));
        let wp = WeightingProjector::new(&z, &DVector::from_element(7, 1.0)).unwrap();
        let pz = &z * (z.transpose() * &z).try_inverse().unwrap() * z.transpose();
        assert!((wp.dense_v() - pz).amax() < 1e-12);
    }

    #[test]
    fn zero_residuals_collapse_rank() {
        let z = DMatrix::from_fn(6, 2, |i, j| ((i + 1) as f64).powi(j as i32));
        let eps = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(WeightingProjector::new(&z, &eps).unwrap_err(), Error::SingularWeighting);
    }

    #[test]
    fn collinear_instruments_are_rank_deficient() {
        let z = DMatrix::from_fn(6, 2, |i, _| i as f64 + 1.0);
        let eps = DVector::from_element(6, 1.0);
        assert!(matches!(WeightingProjector::new(&z, &eps), Err(Error::MomentRankDeficient { .. })));
    }
}
