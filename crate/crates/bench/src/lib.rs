//! Fixtures shared by the benchmarks.

use miar::sim::{dgp_linear_iv, LinearIvDesign};
use miar::{DMatrix, DVector, LinearIVModel, MomentSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Heteroskedastic moments g_i = eps_i z_i.
pub fn moment_set(n: usize, k: usize, seed: u64) -> MomentSet {
    let mut g = rng(seed);
    let z = DMatrix::from_fn(n, k, |_, _| g.sample::<f64, _>(StandardNormal));
    let eps: Vec<f64> = (0..n).map(|i| (0.5 + z[(i, 0)].abs()) * g.sample::<f64, _>(StandardNormal)).collect();
    MomentSet::new(DMatrix::from_fn(n, k, |i, j| eps[i] * z[(i, j)]), vec![0.0]).unwrap()
}

/// The clustered linear IV design under the null beta = 0.
pub fn linear_model(n: usize, k: usize, seed: u64) -> LinearIVModel {
    let d = LinearIvDesign { n, k, pi: (8.0 / n as f64).sqrt(), rho: 0.3, kappa: 2.0, lambda: 1.0, zeta: None };
    dgp_linear_iv(&d, 0.0, &mut rng(seed)).unwrap()
}

pub fn square(n: usize, seed: u64) -> DMatrix<f64> {
    let mut g = rng(seed);
    DMatrix::from_fn(n, n, |_, _| g.sample(StandardNormal))
}

pub fn median_data(n: usize, k: usize, seed: u64) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let d = miar::sim::dgp_median_iv(n, k, 0.5, 0.8, 1.5, 1.0, 1.0, &mut rng(seed)).unwrap();
    (d.y, d.x, d.z)
}
