//! Small dense linear algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative singular value cutoff used for every rank decision.
pub const RANK_TOL: f64 = 1e-10;

/// Thin SVD `a = U diag(s) Vt` with a rank check.
///
/// Returns `Err(rank)` when some singular value falls below
/// `RANK_TOL * s_max`. Columns of U are orthonormal.
pub fn thin_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>), usize> {
    let k = a.ncols();
    let svd = a.clone().svd(true, true);
    let s = svd.singular_values.clone();
    let smax = s.iter().cloned().fold(0.0_f64, f64::max);
    let rank = s.iter().filter(|&&v| v > RANK_TOL * smax && v > 0.0).count();
    if rank < k || !smax.is_finite() {
        return Err(rank);
    }
    Ok((svd.u.unwrap(), s, svd.v_t.unwrap()))
}

/// Numerical rank with the same tolerance as [`thin_svd`].
pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let s = a.clone().singular_values();
    let smax = s.iter().cloned().fold(0.0_f64, f64::max);
    s.iter().filter(|&&v| v > RANK_TOL * smax && v > 0.0).count()
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    let mut s = a.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s).eigenvalues.min()
}

/// Inverse of a symmetric matrix, or `None` unless it is positive definite.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut s = a.clone();
    symmetrize(&mut s);
    s.cholesky().map(|c| c.inverse())
}

/// Moore-Penrose inverse of a symmetric matrix via its eigendecomposition.
pub fn sym_pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = a.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let amax = eig.eigenvalues.amax();
    let tol = amax * RANK_TOL * a.nrows() as f64;
    let inv: DVector<f64> = eig
        .eigenvalues
        .map(|v| if v.abs() > tol { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// `diag(d) * a`, scaling row i by `d[i]`.
pub fn scale_rows(a: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= d[i];
    }
    out
}
