#![allow(dead_code)]

use miar::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn sym_zero_diag(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = normal_matrix(rng, n, n);
    let mut s = &a + a.transpose();
    for i in 0..n {
        s[(i, i)] = 0.0;
    }
    s
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// r' A D_r B r evaluated directly.
pub fn quad_sandwich(r: &[f64], a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = r.len();
    let mut br = vec![0.0; n];
    for i in 0..n {
        br[i] = (0..n).map(|j| b[(i, j)] * r[j]).sum::<f64>() * r[i];
    }
    (0..n).map(|i| r[i] * (0..n).map(|j| a[(i, j)] * br[j]).sum::<f64>()).sum()
}

pub fn quad(r: &[f64], a: &DMatrix<f64>) -> f64 {
    let n = r.len();
    (0..n).map(|i| r[i] * (0..n).map(|j| a[(i, j)] * r[j]).sum::<f64>()).sum()
}
