//! Exact expectations of polynomial forms in a vector r of independent
//! Rademacher signs, plus an exhaustive enumerator used to check them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest n the enumerator accepts (2^24 sign vectors).
pub const MAX_ENUM_N: usize = 24;

/// All 2^n sign vectors in lexicographic order, starting at (-1, ..., -1).
#[derive(Debug, Clone)]
pub struct SignEnumerator {
    n: usize,
    next: u64,
    end: u64,
}

impl SignEnumerator {
    pub fn new(n: usize) -> Result<Self> {
        if n > MAX_ENUM_N {
            return Err(Error::NTooLarge { n });
        }
        Ok(SignEnumerator { n, next: 0, end: 1u64 << n })
    }

    fn range(n: usize, start: u64, end: u64) -> Self {
        SignEnumerator { n, next: start, end }
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

fn fill_signs(code: u64, r: &mut [f64]) {
    let n = r.len();
    for (i, ri) in r.iter_mut().enumerate() {
        *ri = if (code >> (n - 1 - i)) & 1 == 1 { 1.0 } else { -1.0 };
    }
}

impl Iterator for SignEnumerator {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        if self.next >= self.end {
            return None;
        }
        let mut r = vec![0.0; self.n];
        fill_signs(self.next, &mut r);
        self.next += 1;
        Some(r)
    }
}

/// Exact mean of `f` over all 2^n sign vectors.
///
/// The vectors are split into fixed prefix blocks that are summed in order,
/// so the result does not depend on the thread count.
pub fn brute_force_expectation<F>(f: F, n: usize) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if n > MAX_ENUM_N {
        return Err(Error::NTooLarge { n });
    }
    let total = 1u64 << n;
    let blocks = if n >= 12 { 1u64 << 6 } else { 1 };
    let per = total / blocks;
    let partial: Vec<f64> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut r = vec![0.0; n];
            let mut acc = 0.0;
            for code in b * per..(b + 1) * per {
                fill_signs(code, &mut r);
                acc += f(&r);
            }
            acc
        })
        .collect();
    Ok(partial.iter().sum::<f64>() / total as f64)
}

/// Sequential variant of the enumeration over a sub-range, exposed for tests.
pub fn enumerate_range(n: usize, start: u64, end: u64) -> impl Iterator<Item = Vec<f64>> {
    SignEnumerator::range(n, start, end.min(1u64 << n))
}

type M = DMatrix<f64>;

fn tr(a: &M) -> f64 {
    a.trace()
}

/// D_A: the diagonal part of A.
fn dg(a: &M) -> M {
    M::from_diagonal(&a.diagonal())
}

/// iota' A iota
fn sum(a: &M) -> f64 {
    a.sum()
}

fn had(a: &M, b: &M) -> M {
    a.component_mul(b)
}

/// tr(A (.) B) = sum_i A_ii B_ii
fn tr_had(a: &M, b: &M) -> f64 {
    a.diagonal().dot(&b.diagonal())
}

fn check_square(ms: &[&M]) -> Result<usize> {
    let n = ms[0].nrows();
    if ms.iter().all(|m| m.nrows() == n && m.ncols() == n) {
        Ok(n)
    } else {
        Err(Error::DimensionMismatch("matrices must be square and of equal size".into()))
    }
}

/// E[r'A r] = tr(A).
pub fn expect_quadratic(a: &M) -> Result<f64> {
    check_square(&[a])?;
    Ok(tr(a))
}

/// E[r'A1 r r'A2 r].
pub fn expect_quad_quad(a1: &M, a2: &M) -> Result<f64> {
    check_square(&[a1, a2])?;
    Ok(-2.0 * tr(&(dg(a1) * a2)) + tr(a1) * tr(a2) + tr(&(a1 * a2)) + tr(&(a1.transpose() * a2)))
}

/// E[v'r r'A2 D_r A1 r].
pub fn expect_cubic_mixed(v: &DVector<f64>, a1: &M, a2: &M) -> Result<f64> {
    let n = check_square(&[a1, a2])?;
    if v.len() != n {
        return Err(Error::DimensionMismatch("vector length differs from matrix size".into()));
    }
    let iota = DVector::from_element(n, 1.0);
    let t1 = (v.transpose() * a2 * dg(a1) * &iota)[(0, 0)];
    let t2 = (iota.transpose() * had(a2, &a1.transpose()) * v)[(0, 0)];
    let t3 = (iota.transpose() * dg(a2) * a1 * v)[(0, 0)];
    let t4 = (iota.transpose() * dg(a2) * dg(a1) * v)[(0, 0)];
    Ok(t1 + t2 + t3 - 2.0 * t4)
}

/// The printed lines of the expansion of E[r'A1 D_r A2 r r'A3 D_r A4 r],
/// one entry per line, so that each can be inspected separately.
pub fn bilinear_sandwich_lines(a1: &M, a2: &M, a3: &M, a4: &M) -> Result<[f64; 15]> {
    let n = check_square(&[a1, a2, a3, a4])?;
    let eye = M::identity(n, n);
    let (t1, t2, t3, t4) = (a1.transpose(), a2.transpose(), a3.transpose(), a4.transpose());
    let (d1, d2, d3, d4) = (dg(a1), dg(a2), dg(a3), dg(a4));

    let line1 = tr(&(dg(&(a4 * a1)) * dg(&(a2 * a3))));

    let m = &d3 * a4 * a1 * &d2;
    let line2 = sum(&m) - 2.0 * tr(&m) + sum(&had(&had(a2, a3), &(&t1 * &t4)));

    let m = &d1 * a2 * a3 * &d4;
    let line3 = sum(&m) - 2.0 * tr(&m) + sum(&had(&had(a4, a1), &(&t3 * &t2)));

    let line4 = sum(&(had(a1, a3) * had(a2, a4))) + tr_had(&(&t1 * &t2), &(&t3 * &t4));

    let m = dg(&(a4 * a3)) * a1 * &d2;
    let line5 = -2.0 * tr(&(had(a1, a3) * had(a2, a4))) + sum(&m) - 2.0 * tr(&m);

    let m = dg(&(a2 * a1)) * a3 * &d4;
    let line6 = sum(&m) - 2.0 * tr(&m);

    let line7 = -2.0 * sum(&(&d1 * &d2 * a3 * &d4)) - 2.0 * sum(&(&d3 * &d4 * a1 * &d2))
        + 16.0 * tr(&(&d3 * &d4 * a1 * &d2));

    let line8 = -2.0 * sum(&had(&had(&(a1 * &d2), a4), &t3))
        - 2.0 * sum(&had(&had(&(a3 * &d4), a2), &t1));

    let m = &d4 * &t3 * a1 * &d2;
    let line9 = sum(&m) - tr(&m) - tr(&(&d2 * &t1 * a3 * &d4));

    let line10 = sum(&had(&(had(a3, &t1) * a4), a2))
        - 2.0 * sum(&had(&(had(&had(a1, &t3), &eye) * a2), a4));

    let m = had(a1, &(a3 * had(&t2, a4)));
    let line11 = sum(&m) - 2.0 * tr(&m);

    let line12 = -2.0 * tr(&had(a3, &(a1 * had(&t4, a2))));

    let line13 = sum(&(had(a1, &t2) * &t4 * &d3)) - 2.0 * sum(&(had(&had(a1, &t2), &eye) * &t4 * &d3));

    let line14 = sum(&(had(a3, &t4) * &t2 * &d1)) - 2.0 * sum(&(had(&had(a3, &t4), &eye) * &t2 * &d1));

    let line15 = sum(&(&d1 * a2 * &t4 * &d3));

    Ok([
        line1, line2, line3, line4, line5, line6, line7, line8, line9, line10, line11, line12, line13,
        line14, line15,
    ])
}

/// E[r'A1 D_r A2 r r'A3 D_r A4 r].
pub fn expect_bilinear_sandwich(a1: &M, a2: &M, a3: &M, a4: &M) -> Result<f64> {
    Ok(bilinear_sandwich_lines(a1, a2, a3, a4)?.iter().sum())
}

/// E[r'A1 D_r A2 A3 D_r A4 r].
pub fn expect_sandwich_pair(a1: &M, a2: &M, a3: &M, a4: &M) -> Result<f64> {
    check_square(&[a1, a2, a3, a4])?;
    let m = dg(a1) * a2 * a3 * dg(a4);
    Ok(tr(&(dg(&(a4 * a1)) * dg(&(a2 * a3)))) + sum(&m) - 2.0 * tr(&m)
        + sum(&had(&had(a4, a1), &(a3.transpose() * a2.transpose()))))
}

/// Symmetric part of A after checking that its diagonal is zero.
fn zero_diag_sym(a: &M, which: usize) -> Result<M> {
    let scale = a.amax().max(1.0);
    if a.diagonal().iter().any(|d| d.abs() > 1e-14 * scale) {
        return Err(Error::DiagonalNotZero { which });
    }
    Ok((a + a.transpose()) * 0.5)
}

/// E[(r'A1 r)^2 (r'A2 r)^2] for zero-diagonal A1, A2.
///
/// Only the symmetric parts of the matrices enter the quadratic forms, so
/// asymmetric inputs are symmetrised first.
pub fn expect_quartic_zero_diag(a1: &M, a2: &M) -> Result<f64> {
    let n = check_square(&[a1, a2])?;
    let a1 = zero_diag_sym(a1, 1)?;
    let a2 = zero_diag_sym(a2, 2)?;
    let eye = M::identity(n, n);
    let s11 = &a1 * &a1;
    let s22 = &a2 * &a2;
    let s12 = &a1 * &a2;
    let v = 4.0 * tr(&s11) * tr(&s22)
        + 8.0 * tr(&s12).powi(2)
        + 16.0 * tr(&(&s12 * &s12))
        + 32.0 * tr(&(&a1 * &s22 * &a1))
        - 32.0 * sum(&(had(&eye, &s11) * had(&eye, &s22)))
        - 64.0 * sum(&(had(&eye, &s12) * had(&eye, &s12)))
        + 32.0 * sum(&had(&had(&a1, &a1), &had(&a2, &a2)));
    Ok(v)
}

/// E[r'A1 r r'A2 r r'A3 r] for zero-diagonal A1, A2 and any square A3.
pub fn expect_triple_quadratic(a1: &M, a2: &M, a3: &M) -> Result<f64> {
    check_square(&[a1, a2, a3])?;
    let a1 = zero_diag_sym(a1, 1)?;
    let a2 = zero_diag_sym(a2, 2)?;
    let a3 = (a3 + a3.transpose()) * 0.5;
    let s12 = &a1 * &a2;
    Ok(2.0 * tr(&a3) * tr(&s12) + 8.0 * tr(&(&a3 * &s12)) - 8.0 * tr_had(&a3, &s12))
}
