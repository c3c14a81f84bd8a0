//! Data generating processes for the censored panel, quantile IV and linear
//! IV simulation designs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterMap;
use crate::error::{Error, Result};
use crate::iv::LinearIVModel;
use crate::moments::PanelData;

/// Below this skewness parameter the centred Gamma is replaced by its
/// Normal limit, since the shape 1/zeta stops being representable usefully.
pub const GAMMA_NORMAL_LIMIT: f64 = 1e-6;

/// Weight on the heteroskedastic error component in the linear IV design.
pub const PHI: f64 = 1.38072;

/// Cluster sizes between 4 and 12, repeated until n observations are covered.
pub const CLUSTER_CYCLE: [usize; 10] = [4, 12, 5, 11, 6, 10, 7, 9, 8, 8];

/// Gamma(shape 1/zeta, rate 1/sqrt(sigma_sq zeta)) shifted to mean zero:
/// variance sigma_sq, skewness 2 sqrt(zeta).
#[derive(Debug, Clone, Copy)]
pub struct CenteredGamma {
    gamma: Option<Gamma<f64>>,
    shift: f64,
    sd: f64,
}

impl CenteredGamma {
    pub fn new(zeta: f64, sigma_sq: f64) -> Result<Self> {
        if !(zeta >= 0.0 && sigma_sq > 0.0 && zeta.is_finite() && sigma_sq.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "centred Gamma needs zeta >= 0 and sigma_sq > 0, got {zeta}, {sigma_sq}"
            )));
        }
        let sd = sigma_sq.sqrt();
        if zeta <= GAMMA_NORMAL_LIMIT {
            return Ok(CenteredGamma { gamma: None, shift: 0.0, sd });
        }
        let rate = (1.0 / (sigma_sq * zeta)).sqrt();
        let gamma = Gamma::new(1.0 / zeta, 1.0 / rate).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(CenteredGamma { gamma: Some(gamma), shift: (sigma_sq / zeta).sqrt(), sd })
    }

    /// True when draws come from the Normal limit.
    pub fn is_normal_limit(&self) -> bool {
        self.gamma.is_none()
    }
}

impl Distribution<f64> for CenteredGamma {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.gamma {
            Some(g) => g.sample(rng) - self.shift,
            None => self.sd * rng.sample::<f64, _>(StandardNormal),
        }
    }
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Censored panel: x_1 = alpha_i + eta_it, other regressors N(0, 1),
/// eps_it ~ N(0, alpha_i^2) and y = max(0, alpha_i + x'beta + eps).
pub fn dgp_panel_tobit<R: Rng + ?Sized>(n: usize, t: usize, beta: &[f64], rng: &mut R) -> Result<PanelData> {
    let p = beta.len();
    if n == 0 || t < 2 || p == 0 {
        return Err(Error::InvalidInput(format!("tobit design needs n >= 1, T >= 2, p >= 1; got {n}, {t}, {p}")));
    }
    let mut y = DMatrix::zeros(n, t);
    let mut x = vec![DMatrix::zeros(n, p); t];
    for i in 0..n {
        let alpha = std_normal(rng);
        for (tt, xt) in x.iter_mut().enumerate() {
            xt[(i, 0)] = alpha + std_normal(rng);
            for l in 1..p {
                xt[(i, l)] = std_normal(rng);
            }
            let eps = alpha * std_normal(rng);
            let index: f64 = (0..p).map(|l| xt[(i, l)] * beta[l]).sum();
            y[(i, tt)] = (alpha + index + eps).max(0.0);
        }
    }
    PanelData::new(y, x, 0.0)
}

/// Quantile IV data (y, x, z).
#[derive(Debug, Clone)]
pub struct MedianIvData {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

/// y = -1 + slope x + eps, x = pi z'iota + nu with (eps, nu) standard
/// bivariate normal with correlation rho and centred Gamma instruments.
pub fn dgp_median_iv<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    pi: f64,
    rho: f64,
    zeta: f64,
    sigma_sq: f64,
    slope: f64,
    rng: &mut R,
) -> Result<MedianIvData> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::InvalidInput(format!("rho must lie in [-1, 1], got {rho}")));
    }
    let inst = CenteredGamma::new(zeta, sigma_sq)?;
    let z = DMatrix::from_fn(n, k, |_, _| inst.sample(rng));
    let mut y = DVector::zeros(n);
    let mut x = DMatrix::zeros(n, 1);
    let c = (1.0 - rho * rho).sqrt();
    for i in 0..n {
        let eps = std_normal(rng);
        let nu = rho * eps + c * std_normal(rng);
        x[(i, 0)] = pi * z.row(i).sum() + nu;
        y[i] = -1.0 + slope * x[(i, 0)] + eps;
    }
    Ok(MedianIvData { y, x, z })
}

/// Parameters of the clustered heteroskedastic linear IV design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearIvDesign {
    pub n: usize,
    pub k: usize,
    pub pi: f64,
    pub rho: f64,
    pub kappa: f64,
    /// Weight on the idiosyncratic components; 1 gives independent data.
    pub lambda: f64,
    /// Skewness of the error components; `None` gives normal errors.
    pub zeta: Option<f64>,
}

impl LinearIvDesign {
    pub fn validate(&self) -> Result<()> {
        if self.k < 5 {
            return Err(Error::KTooSmall { k: self.k });
        }
        if self.n <= self.k {
            return Err(Error::InvalidInput(format!("need n > k, got n = {}, k = {}", self.n, self.k)));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidInput("lambda must lie in [0, 1] and rho in [-1, 1]".into()));
        }
        if !self.kappa.is_finite() || !self.pi.is_finite() {
            return Err(Error::InvalidInput("kappa and pi must be finite".into()));
        }
        Ok(())
    }
}

/// Sizes from [`CLUSTER_CYCLE`] covering n, the last one truncated.
pub fn cluster_sizes(n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = n;
    for &s in CLUSTER_CYCLE.iter().cycle() {
        if left == 0 {
            break;
        }
        out.push(s.min(left));
        left -= s.min(left);
    }
    out
}

/// Instruments (1, z, z^2, z^3, z^4, z D_1, ..., z D_{k-5}) with Bernoulli(1/2) D.
fn instruments<R: Rng + ?Sized>(zt: &DVector<f64>, k: usize, rng: &mut R) -> DMatrix<f64> {
    let n = zt.len();
    let mut z = DMatrix::zeros(n, k);
    for i in 0..n {
        let v = zt[i];
        z[(i, 0)] = 1.0;
        z[(i, 1)] = v;
        z[(i, 2)] = v * v;
        z[(i, 3)] = v * v * v;
        z[(i, 4)] = v * v * v * v;
        for j in 5..k {
            z[(i, j)] = if rng.random_bool(0.5) { v } else { 0.0 };
        }
    }
    z
}

/// One draw from the linear IV design with y = beta x + eps. The returned
/// model carries the cluster map.
pub fn dgp_linear_iv<R: Rng + ?Sized>(d: &LinearIvDesign, beta: f64, rng: &mut R) -> Result<LinearIVModel> {
    d.validate()?;
    let sizes = cluster_sizes(d.n);
    let clusters = ClusterMap::from_sizes(&sizes)?;
    let skew = match d.zeta {
        Some(z) => Some((CenteredGamma::new(z, 1.0)?, CenteredGamma::new(z, 0.86 * 0.86)?)),
        None => None,
    };
    let v2_normal = Normal::new(0.0, 0.86).map_err(|e| Error::InvalidInput(e.to_string()))?;
    // unit-variance and v2-variance error draws
    let unit = |rng: &mut R| match &skew {
        Some((g, _)) => g.sample(rng),
        None => std_normal(rng),
    };
    let draw_v2 = |rng: &mut R| match &skew {
        Some((_, g)) => g.sample(rng),
        None => v2_normal.sample(rng),
    };
    let half_kappa = d.kappa / 2.0;

    // cluster components: z, eta, v1, v2
    let mut common = Vec::with_capacity(sizes.len());
    for _ in &sizes {
        let zc = std_normal(rng);
        let eta = unit(rng);
        let v1 = zc.abs().powf(half_kappa) * unit(rng);
        let v2 = draw_v2(rng);
        common.push([zc, eta, v1, v2]);
    }
    let (wi, wc) = (d.lambda.sqrt(), (1.0 - d.lambda).sqrt());
    let n = d.n;
    let mut zt = DVector::zeros(n);
    let mut eta = DVector::zeros(n);
    let mut v1 = DVector::zeros(n);
    let mut v2 = DVector::zeros(n);
    for (i, &h) in clusters.assignment().iter().enumerate() {
        let zi = std_normal(rng);
        let ei = unit(rng);
        let v1i = zi.abs().powf(half_kappa) * unit(rng);
        let v2i = draw_v2(rng);
        let c = &common[h];
        zt[i] = wi * zi + wc * c[0];
        eta[i] = wi * ei + wc * c[1];
        v1[i] = wi * v1i + wc * c[2];
        v2[i] = wi * v2i + wc * c[3];
    }
    let z = instruments(&zt, d.k, rng);
    let scale = ((1.0 - d.rho * d.rho) / (PHI * PHI + 0.86f64.powi(4))).sqrt();
    let eps = DVector::from_fn(n, |i, _| d.rho * eta[i] + scale * (PHI * v1[i] + 0.86 * v2[i]));
    let x = DMatrix::from_fn(n, 1, |i, _| d.pi * zt[i] + eta[i]);
    let y = DVector::from_fn(n, |i, _| beta * x[(i, 0)] + eps[i]);
    LinearIVModel::new(y, x, z)?.with_clusters(clusters)
}
