//! Moment conditions for the model classes whose moments are invariant to
//! sign flips: censored panels, quantile IV, linear IV, dynamic panels and
//! symmetric location models. Also the simulated exact test for quantile IV.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar::{check_alpha, Method, MomentSet, TestResult};
use crate::error::{Error, Result};
use crate::linalg::{self, thin_svd};

pub use crate::iv::linear_iv_moments;

/// Balanced panel: `y` is n x T and `x[t]` holds the n x p regressors of
/// period t.
#[derive(Debug, Clone)]
pub struct PanelData {
    y: DMatrix<f64>,
    x: Vec<DMatrix<f64>>,
    censor_floor: f64,
}

impl PanelData {
    pub fn new(y: DMatrix<f64>, x: Vec<DMatrix<f64>>, censor_floor: f64) -> Result<Self> {
        let (n, t) = y.shape();
        if t < 2 {
            return Err(Error::InvalidInput(format!("panel needs T >= 2, got {t}")));
        }
        if x.len() != t {
            return Err(Error::DimensionMismatch(format!(
                "y has {t} periods but x has {}",
                x.len()
            )));
        }
        let p = x[0].ncols();
        if p == 0 || x.iter().any(|xt| xt.nrows() != n || xt.ncols() != p) {
            return Err(Error::DimensionMismatch("every x[t] must be n x p with p >= 1".into()));
        }
        let finite = y.iter().chain(x.iter().flat_map(|m| m.iter())).all(|v| v.is_finite());
        if !finite || !censor_floor.is_finite() {
            return Err(Error::InvalidInput("panel data has non-finite entries".into()));
        }
        Ok(PanelData { y, x, censor_floor })
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn x(&self) -> &[DMatrix<f64>] {
        &self.x
    }

    pub fn censor_floor(&self) -> f64 {
        self.censor_floor
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn t(&self) -> usize {
        self.y.ncols()
    }

    pub fn p(&self) -> usize {
        self.x[0].ncols()
    }
}

/// What an event rule sees for one unit and one period pair (t1, t2).
#[derive(Debug, Clone, Copy)]
pub struct PairObs {
    pub y1: f64,
    pub y2: f64,
    /// y_{t1} - y_{t2}
    pub dy: f64,
    /// (x_{t1} - x_{t2})' beta
    pub dxb: f64,
    pub floor: f64,
}

/// An event family returns +1 on its A event, -1 on its B event and 0
/// otherwise. The moment is that sign times the regressor difference.
pub type EventRule = dyn Fn(&PairObs) -> f64 + Sync;

/// Symmetrically trimmed pair: y_{t1} > floor + max(0, dx'beta) and
/// y_{t2} > floor + max(0, -dx'beta), so both latent errors are truncated at
/// the same point and their difference is symmetric. A: dy >= dx'beta,
/// B: dy < dx'beta.
pub fn trimmed_pair_event(o: &PairObs) -> f64 {
    if o.y1 > o.floor + o.dxb.max(0.0) && o.y2 > o.floor + (-o.dxb).max(0.0) {
        if o.dy >= o.dxb {
            1.0
        } else {
            -1.0
        }
    } else {
        0.0
    }
}

/// Untrimmed variant: both periods above the floor, same A/B split. The
/// truncation points differ across periods when dx'beta != 0, so this one is
/// not reflection invariant in general.
pub fn both_positive_event(o: &PairObs) -> f64 {
    if o.y1 > o.floor && o.y2 > o.floor {
        if o.dy >= o.dxb {
            1.0
        } else {
            -1.0
        }
    } else {
        0.0
    }
}

/// Censored panel moments with the native event family only:
/// k = floor(T/2) * p.
pub fn panel_tobit_moments(d: &PanelData, beta: &[f64]) -> Result<MomentSet> {
    panel_tobit_moments_with(d, beta, &[&trimmed_pair_event])
}

/// Censored panel moments with caller-supplied event families. Periods are
/// paired as (1,2), (3,4), ...; an odd last period is dropped. Columns are
/// ordered by pair, then family, then regressor.
pub fn panel_tobit_moments_with(d: &PanelData, beta: &[f64], families: &[&EventRule]) -> Result<MomentSet> {
    let (n, p) = (d.n(), d.p());
    if beta.len() != p {
        return Err(Error::DimensionMismatch(format!("beta has length {}, expected {p}", beta.len())));
    }
    if families.is_empty() {
        return Err(Error::InvalidInput("need at least one event family".into()));
    }
    let b = DVector::from_column_slice(beta);
    let pairs = d.t() / 2;
    let k = pairs * families.len() * p;
    let mut g = DMatrix::zeros(n, k);
    for pair in 0..pairs {
        let (t1, t2) = (2 * pair, 2 * pair + 1);
        let dx = &d.x[t1] - &d.x[t2];
        let dxb = &dx * &b;
        for (f, rule) in families.iter().enumerate() {
            let base = (pair * families.len() + f) * p;
            for i in 0..n {
                let o = PairObs {
                    y1: d.y[(i, t1)],
                    y2: d.y[(i, t2)],
                    dy: d.y[(i, t1)] - d.y[(i, t2)],
                    dxb: dxb[i],
                    floor: d.censor_floor,
                };
                let s = rule(&o);
                if s != 0.0 {
                    for l in 0..p {
                        g[(i, base + l)] = s * dx[(i, l)];
                    }
                }
            }
        }
    }
    if let Some(column) = (0..k).find(|&j| g.column(j).iter().all(|&v| v == 0.0)) {
        return Err(Error::AllCensored { column });
    }
    MomentSet::new(g, beta.to_vec())
}

/// Transformation applied to the instruments in quantile moments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Psi {
    #[default]
    Identity,
    /// Centre and scale each column to unit sample variance.
    Standardize,
}

impl Psi {
    pub fn apply(self, z: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Psi::Identity => z.clone(),
            Psi::Standardize => {
                let n = z.nrows() as f64;
                let mut out = z.clone();
                for mut c in out.column_iter_mut() {
                    let mean = c.sum() / n;
                    c.add_scalar_mut(-mean);
                    let sd = (c.norm_squared() / n).sqrt();
                    if sd > 0.0 {
                        c /= sd;
                    }
                }
                out
            }
        }
    }
}

/// Quantile level and the affine quantile function theta[0] + theta[1..]'x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSpec {
    pub tau: f64,
    pub theta: Vec<f64>,
    #[serde(default)]
    pub psi: Psi,
}

impl QuantileSpec {
    pub fn median(theta: Vec<f64>) -> Self {
        QuantileSpec { tau: 0.5, theta, psi: Psi::Identity }
    }

    /// Only the median gives sign-symmetric moments; other levels are
    /// allowed but carry no size guarantee for the AR tests.
    pub fn is_reflection_invariant(&self) -> bool {
        self.tau == 0.5
    }

    fn check(&self, p: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidInput(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.theta.len() != p + 1 {
            return Err(Error::DimensionMismatch(format!(
                "theta has length {}, expected 1 + {p}",
                self.theta.len()
            )));
        }
        Ok(())
    }
}

/// Centred indicators tau - 1{y_i <= theta_1 + theta_2'x_i}.
fn quantile_signs(y: &DVector<f64>, x: &DMatrix<f64>, q: &QuantileSpec) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("y has {} rows, x has {n}", y.len())));
    }
    q.check(p)?;
    let slope = DVector::from_column_slice(&q.theta[1..]);
    let fit = x * slope;
    Ok(DVector::from_fn(n, |i, _| {
        let below = y[i] <= q.theta[0] + fit[i];
        q.tau - if below { 1.0 } else { 0.0 }
    }))
}

/// g_i = (tau - 1{y_i <= q(x_i; theta)}) psi(z_i).
pub fn median_iv_moments(y: &DVector<f64>, x: &DMatrix<f64>, z: &DMatrix<f64>, q: &QuantileSpec) -> Result<MomentSet> {
    if z.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!("z has {} rows, y has {}", z.nrows(), y.len())));
    }
    let s = quantile_signs(y, x, q)?;
    MomentSet::new(linalg::scale_rows(&q.psi.apply(z), &s), q.theta.clone())
}

/// Dynamic panel moments (y_t - theta y_{t-1})(dy_{t-1} - theta dy_{t-2})
/// for periods t = 4, 7, 10, ... (counting from 1), so no two columns share
/// a difference.
pub fn ahn_schmidt_invariant_moments(y: &DMatrix<f64>, theta: f64) -> Result<MomentSet> {
    let (n, t_len) = y.shape();
    if t_len < 4 {
        return Err(Error::InvalidInput(format!("need T >= 4, got {t_len}")));
    }
    // zero-based index of period t is t - 1
    let periods: Vec<usize> = (3..t_len).step_by(3).collect();
    let g = DMatrix::from_fn(n, periods.len(), |i, j| {
        let t = periods[j];
        let lev = y[(i, t)] - theta * y[(i, t - 1)];
        let d1 = y[(i, t - 1)] - y[(i, t - 2)];
        let d2 = y[(i, t - 2)] - y[(i, t - 3)];
        lev * (d1 - theta * d2)
    });
    MomentSet::new(g, vec![theta])
}

/// Probabilists' Hermite polynomial He_m(x).
pub fn hermite(m: usize, x: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, x);
    if m == 0 {
        return h0;
    }
    for j in 1..m {
        let h2 = x * h1 - j as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// Column j is He_{orders[j]}(x_i); odd orders only.
pub fn hermite_symmetry_moments(x: &DVector<f64>, orders: &[usize]) -> Result<MomentSet> {
    if orders.is_empty() {
        return Err(Error::InvalidInput("need at least one Hermite order".into()));
    }
    if let Some(&order) = orders.iter().find(|&&o| o % 2 == 0) {
        return Err(Error::EvenOrderRejected { order });
    }
    let g = DMatrix::from_fn(x.len(), orders.len(), |i, j| hermite(orders[j], x[i]));
    MomentSet::new(g, Vec::new())
}

/// AR of D_s Z given the thin factor of Z, for arbitrary nonzero signs s.
struct QuantileAr {
    z: DMatrix<f64>,
    q: DMatrix<f64>,
}

impl QuantileAr {
    fn new(z: DMatrix<f64>) -> Result<Self> {
        let k = z.ncols();
        let (q, _, _) = thin_svd(&z).map_err(|rank| Error::MomentRankDeficient { rank, k })?;
        Ok(QuantileAr { z, q })
    }

    fn ar(&self, s: &DVector<f64>) -> Result<f64> {
        if s.iter().all(|v| v.abs() == s[0].abs()) {
            // |s| constant: P_{D_s Z} = D_r P_Z D_r
            let r = s.map(|v| v.signum());
            return Ok(self.q.tr_mul(&r).norm_squared());
        }
        let zs = linalg::scale_rows(&self.z, s);
        let w = zs.tr_mul(&zs);
        let b = zs.tr_mul(&DVector::from_element(s.len(), 1.0));
        let chol = w.cholesky().ok_or(Error::MomentRankDeficient { rank: 0, k: self.z.ncols() })?;
        Ok(b.dot(&chol.solve(&b)))
    }
}

/// Simulated exact AR test for quantile IV. The indicator 1{y_i <= q} is
/// Bernoulli(tau) under the null independently of z, so redrawing it gives
/// the exact null law of the AR statistic.
///
/// Rejects when the observed AR exceeds the ceil((1 - alpha) D)-th order
/// statistic of the D simulated values. Draw d uses stream d of `seed`.
pub fn ch_exact_test(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    q: &QuantileSpec,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<TestResult> {
    check_alpha(alpha)?;
    if draws == 0 {
        return Err(Error::InvalidInput("need at least one draw".into()));
    }
    if z.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!("z has {} rows, y has {}", z.nrows(), y.len())));
    }
    let s = quantile_signs(y, x, q)?;
    let (n, k) = z.shape();
    if n <= k {
        return Err(Error::InvalidInput(format!("need n > k, got n = {n}, k = {k}")));
    }
    let eval = QuantileAr::new(q.psi.apply(z))?;
    let observed = eval.ar(&s)?;
    let tau = q.tau;
    let mut sims = (0..draws as u64)
        .into_par_iter()
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d);
            let sd = DVector::from_fn(n, |_, _| if rng.random_bool(tau) { tau - 1.0 } else { tau });
            eval.ar(&sd)
        })
        .collect::<Result<Vec<f64>>>()?;
    let exceed = sims.iter().filter(|&&v| v >= observed).count();
    sims.sort_by(f64::total_cmp);
    let idx = (((1.0 - alpha) * draws as f64).ceil() as usize).clamp(1, draws) - 1;
    let crit = sims[idx];
    Ok(
        TestResult::one_sided(Method::ChExact, observed, crit, exceed as f64 / draws as f64, alpha, n, k)
            .with_diag("draws", draws as f64)
            .with_diag("tau", tau),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(y: &[[f64; 2]], dx: &[f64]) -> PanelData {
        let n = y.len();
        let ym = DMatrix::from_fn(n, 2, |i, t| y[i][t]);
        let x1 = DMatrix::from_fn(n, 1, |i, _| dx[i]);
        let x2 = DMatrix::zeros(n, 1);
        PanelData::new(ym, vec![x1, x2], 0.0).unwrap()
    }

    #[test]
    fn tobit_event_signs() {
        let d = panel(&[[2.0, 1.0], [0.0, 3.0], [1.5, 4.0], [1.0, 1.5]], &[1.0, 1.0, 2.0, -1.0]);
        let g = panel_tobit_moments(&d, &[0.5]).unwrap();
        // dy = 1 >= 0.5 -> +dx
        assert_eq!(g.g()[(0, 0)], 1.0);
        // censored first period
        assert_eq!(g.g()[(1, 0)], 0.0);
        // dy = -2.5 < 1 -> -dx
        assert_eq!(g.g()[(2, 0)], -2.0);
        // dy = -0.5 = dx'beta, tie goes to A
        assert_eq!(g.g()[(3, 0)], -1.0);
    }

    #[test]
    fn tobit_column_count_with_four_families() {
        let n = 40;
        let y = DMatrix::from_fn(n, 5, |i, t| 1.0 + ((i * 7 + t * 3) % 5) as f64);
        let x = (0..5).map(|t| DMatrix::from_fn(n, 2, |i, l| ((i + t * 11 + l * 5) % 7) as f64)).collect();
        let d = PanelData::new(y, x, 0.0).unwrap();
        let fams: [&EventRule; 4] = [&trimmed_pair_event; 4];
        let fam_g = panel_tobit_moments_with(&d, &[0.1, -0.2], &fams);
        // duplicated families give rank deficiency later but the shape is what matters here
        assert_eq!(fam_g.unwrap().k(), 16);
        assert_eq!(panel_tobit_moments(&d, &[0.1, -0.2]).unwrap().k(), 4);
    }

    #[test]
    fn tobit_all_censored_column() {
        let y = DMatrix::from_fn(6, 2, |i, t| if t == 0 { 0.0 } else { i as f64 });
        let x = vec![DMatrix::from_element(6, 1, 1.0), DMatrix::zeros(6, 1)];
        let d = PanelData::new(y, x, 0.0).unwrap();
        assert_eq!(panel_tobit_moments(&d, &[1.0]).unwrap_err(), Error::AllCensored { column: 0 });
    }

    #[test]
    fn median_moment_values() {
        let y = DVector::from_vec(vec![-1.0, 3.0, 0.0]);
        let x = DMatrix::from_vec(3, 1, vec![0.0, 0.0, 0.0]);
        let z = DMatrix::from_vec(3, 2, vec![2.0, 2.0, 4.0, 1.0, 3.0, 5.0]);
        let g = median_iv_moments(&y, &x, &z, &QuantileSpec::median(vec![0.0, 1.0])).unwrap();
        assert_eq!(g.g().row(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, -0.5]);
        assert_eq!(g.g().row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.5]);
        let q = QuantileSpec { tau: 0.75, theta: vec![0.0, 1.0], psi: Psi::Identity };
        let g = median_iv_moments(&y, &x, &z, &q).unwrap();
        assert_eq!(g.g()[(1, 0)], 0.75 * 2.0);
        assert!(!q.is_reflection_invariant());
    }

    #[test]
    fn ahn_schmidt_columns() {
        let y = DMatrix::from_fn(5, 10, |i, t| ((i + 2) * (t + 1)) as f64 + (t * t) as f64 * 0.1);
        assert_eq!(ahn_schmidt_invariant_moments(&y.columns(0, 4).into_owned(), 0.3).unwrap().k(), 1);
        assert_eq!(ahn_schmidt_invariant_moments(&y.columns(0, 6).into_owned(), 0.3).unwrap().k(), 1);
        let g = ahn_schmidt_invariant_moments(&y, 0.0).unwrap();
        assert_eq!(g.k(), 3);
        for (j, t) in [3usize, 6, 9].iter().enumerate() {
            for i in 0..5 {
                assert_eq!(g.g()[(i, j)], y[(i, *t)] * (y[(i, t - 1)] - y[(i, t - 2)]));
            }
        }
    }

    #[test]
    fn hermite_recurrence() {
        for x in [-1.3, 0.0, 0.4, 2.5] {
            assert_eq!(hermite(1, x), x);
            assert!((hermite(3, x) - (x * x * x - 3.0 * x)).abs() < 1e-12);
            assert!((hermite(5, x) - (x.powi(5) - 10.0 * x.powi(3) + 15.0 * x)).abs() < 1e-10);
        }
        let x = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        assert_eq!(hermite_symmetry_moments(&x, &[1, 2]).unwrap_err(), Error::EvenOrderRejected { order: 2 });
    }

    #[test]
    fn ch_exact_single_draw_and_determinism() {
        let n = 30;
        let y = DVector::from_fn(n, |i, _| ((i * 37) % 11) as f64 - 5.0);
        let x = DMatrix::from_fn(n, 1, |i, _| ((i * 13) % 7) as f64 - 3.0);
        let z = DMatrix::from_fn(n, 3, |i, j| (((i + 1) * (j + 2) * 17) % 9) as f64 - 4.0);
        let q = QuantileSpec::median(vec![0.0, 1.0]);
        let one = ch_exact_test(&y, &x, &z, &q, 0.05, 1, 9).unwrap();
        let eval = QuantileAr::new(z.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(0);
        let s = DVector::from_fn(n, |_, _| if rng.random_bool(0.5) { -0.5 } else { 0.5 });
        assert_eq!(one.critical_value, eval.ar(&s).unwrap());
        let a = ch_exact_test(&y, &x, &z, &q, 0.05, 200, 3).unwrap();
        let b = ch_exact_test(&y, &x, &z, &q, 0.05, 200, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quantile_ar_paths_agree() {
        let n = 25;
        let z = DMatrix::from_fn(n, 4, |i, j| ((i * 31 + j * 17) % 13) as f64 / 3.0 - 2.0);
        let eval = QuantileAr::new(z.clone()).unwrap();
        let s = DVector::from_fn(n, |i, _| if (i * 7) % 3 == 0 { 0.5 } else { -0.5 });
        let g = MomentSet::new(linalg::scale_rows(&z, &s), vec![]).unwrap();
        let ar = crate::ar::ar_statistic(&crate::ar::build_projector(&g).unwrap());
        assert!((eval.ar(&s).unwrap() - ar).abs() < 1e-10);
        let s2 = DVector::from_fn(n, |i, _| if (i * 7) % 3 == 0 { 0.3 } else { -0.7 });
        let g = MomentSet::new(linalg::scale_rows(&z, &s2), vec![]).unwrap();
        let ar = crate::ar::ar_statistic(&crate::ar::build_projector(&g).unwrap());
        assert!((eval.ar(&s2).unwrap() - ar).abs() < 1e-10);
    }
}
