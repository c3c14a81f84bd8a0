//! Confidence sets by inverting a test over a grid for one coordinate of the
//! parameter, with the remaining coordinates profiled out.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid for the profiled coordinate plus the nuisance optimiser settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub param_index: usize,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    #[serde(default = "default_starts")]
    pub nuisance_starts: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Standard deviation of the random multistart points around the warm start.
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_starts() -> usize {
    4
}
fn default_max_iter() -> usize {
    400
}
fn default_tol() -> f64 {
    1e-8
}
fn default_spread() -> f64 {
    1.0
}

impl GridSpec {
    pub fn new(param_index: usize, lo: f64, hi: f64, step: f64) -> Result<Self> {
        let g = GridSpec {
            param_index,
            lo,
            hi,
            step,
            nuisance_starts: default_starts(),
            max_iter: default_max_iter(),
            tol: default_tol(),
            spread: default_spread(),
            seed: 0,
        };
        g.validate()?;
        Ok(g)
    }

    /// Parse "lo:hi:step".
    pub fn parse(param_index: usize, s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidInput(format!("grid must look like lo:hi:step, got '{s}'")));
        }
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("bad number '{t}' in grid '{s}'")))
        };
        Self::new(param_index, num(parts[0])?, num(parts[1])?, num(parts[2])?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::InvalidInput(format!("grid needs lo < hi, got {}:{}", self.lo, self.hi)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidInput(format!("grid step must be positive, got {}", self.step)));
        }
        if self.nuisance_starts == 0 || self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidInput("optimiser needs starts, max_iter and tol > 0".into()));
        }
        Ok(())
    }

    /// lo, lo + step, ... up to hi (inclusive up to rounding).
    pub fn points(&self) -> Vec<f64> {
        let count = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

/// Test outcome at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub value: f64,
    pub statistic: f64,
    pub critical_value: f64,
    pub accepted: bool,
    /// Set when the evaluator failed; the point then counts as rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSet {
    pub points: Vec<GridPoint>,
    /// Hull of the accepted points, `None` when nothing is accepted.
    pub interval: Option<(f64, f64)>,
    /// Accepted points are not contiguous on the grid.
    pub nonconvex: bool,
    /// The first or last grid point is accepted, so the set may extend
    /// beyond the grid.
    pub touches_boundary: bool,
}

impl ConfidenceSet {
    pub fn from_points(points: Vec<GridPoint>) -> Self {
        let idx: Vec<usize> = points.iter().enumerate().filter(|(_, p)| p.accepted).map(|(i, _)| i).collect();
        let interval = match (idx.first(), idx.last()) {
            (Some(&a), Some(&b)) => Some((points[a].value, points[b].value)),
            _ => None,
        };
        let nonconvex = idx.windows(2).any(|w| w[1] != w[0] + 1);
        let touches_boundary = !idx.is_empty() && (idx[0] == 0 || *idx.last().unwrap() == points.len() - 1);
        ConfidenceSet { points, interval, nonconvex, touches_boundary }
    }

    pub fn is_empty(&self) -> bool {
        self.interval.is_none()
    }

    pub fn length(&self) -> f64 {
        self.interval.map_or(0.0, |(a, b)| b - a)
    }

    pub fn accepted(&self) -> Vec<f64> {
        self.points.iter().filter(|p| p.accepted).map(|p| p.value).collect()
    }
}

fn grid_point(value: f64, r: Result<(f64, f64)>) -> GridPoint {
    match r {
        Ok((statistic, critical_value)) => GridPoint {
            value,
            statistic,
            critical_value,
            accepted: statistic <= critical_value,
            error: None,
        },
        Err(e) => GridPoint {
            value,
            statistic: f64::NAN,
            critical_value: f64::NAN,
            accepted: false,
            error: Some(e.name().to_string()),
        },
    }
}

/// Evaluate `evaluator` (grid value to statistic and critical value) at
/// every grid point in parallel and collect the accepted set.
pub fn invert_test<F>(evaluator: F, g: &GridSpec) -> Result<ConfidenceSet>
where
    F: Fn(f64) -> Result<(f64, f64)> + Sync,
{
    g.validate()?;
    let points = g.points().into_par_iter().map(|v| grid_point(v, evaluator(v))).collect();
    Ok(ConfidenceSet::from_points(points))
}

/// Outcome of a nuisance minimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileResult {
    pub argmin: Vec<f64>,
    pub value: f64,
    pub converged: bool,
}

/// Nelder-Mead from each start; returns the best point over all starts.
/// Non-finite objective values are treated as +infinity.
pub fn profile_minimize<F>(mut objective: F, starts: &[Vec<f64>], max_iter: usize, tol: f64) -> ProfileResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = starts.first().map_or(0, Vec::len);
    if dim == 0 {
        return ProfileResult { argmin: Vec::new(), value: objective(&[]), converged: true };
    }
    let mut best = ProfileResult { argmin: starts[0].clone(), value: f64::INFINITY, converged: false };
    for s in starts {
        let r = nelder_mead(&mut objective, s, max_iter, tol);
        if r.value < best.value || (best.value == f64::INFINITY && r.value == f64::INFINITY) {
            best = r;
        }
    }
    best
}

fn nelder_mead<F>(f: &mut F, x0: &[f64], max_iter: usize, tol: f64) -> ProfileResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..dim {
        let mut v = x0.to_vec();
        v[i] += (0.1 * x0[i].abs()).max(0.25);
        simplex.push(v);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();
    let mut converged = false;
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        fv = order.iter().map(|&i| fv[i]).collect();

        let spread = fv[dim] - fv[0];
        let diameter = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread.is_finite() && spread <= tol * (fv[0].abs() + tol) && diameter <= tol.sqrt() {
            converged = true;
            break;
        }

        let centroid: Vec<f64> =
            (0..dim).map(|j| simplex[..dim].iter().map(|v| v[j]).sum::<f64>() / dim as f64).collect();
        let towards = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[dim]).map(|(c, w)| c + t * (w - c)).collect()
        };
        let xr = towards(-1.0);
        let fr = eval(&xr);
        if fr < fv[0] {
            let xe = towards(-2.0);
            let fe = eval(&xe);
            if fe < fr {
                simplex[dim] = xe;
                fv[dim] = fe;
            } else {
                simplex[dim] = xr;
                fv[dim] = fr;
            }
        } else if fr < fv[dim - 1] {
            simplex[dim] = xr;
            fv[dim] = fr;
        } else {
            let (xc, fc) = if fr < fv[dim] {
                let xc = towards(-0.5);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = towards(0.5);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < fv[dim].min(fr) {
                simplex[dim] = xc;
                fv[dim] = fc;
            } else {
                let x0 = simplex[0].clone();
                for i in 1..=dim {
                    simplex[i] = simplex[i].iter().zip(&x0).map(|(v, b)| b + 0.5 * (v - b)).collect();
                    fv[i] = eval(&simplex[i]);
                }
            }
        }
    }
    let i = (0..=dim).min_by(|&a, &b| fv[a].total_cmp(&fv[b])).unwrap();
    ProfileResult { argmin: simplex[i].clone(), value: fv[i], converged }
}

/// Invert a test of the full parameter vector, profiling every coordinate
/// other than `g.param_index` by minimising statistic minus critical value.
///
/// Grid points are visited in order and each profile starts from the
/// previous optimum, plus `nuisance_starts - 1` seeded random starts around
/// it. `init` is the starting value of the full parameter.
pub fn invert_profiled<F>(test: F, init: &[f64], g: &GridSpec) -> Result<ConfidenceSet>
where
    F: Fn(&[f64]) -> Result<(f64, f64)>,
{
    g.validate()?;
    if g.param_index >= init.len() {
        return Err(Error::DimensionMismatch(format!(
            "param_index {} out of range for a parameter of length {}",
            g.param_index,
            init.len()
        )));
    }
    let nuisance_idx: Vec<usize> = (0..init.len()).filter(|&i| i != g.param_index).collect();
    let full = |value: f64, nu: &[f64]| {
        let mut b = init.to_vec();
        b[g.param_index] = value;
        for (&i, &v) in nuisance_idx.iter().zip(nu) {
            b[i] = v;
        }
        b
    };
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let noise = Normal::new(0.0, g.spread).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut warm: Vec<f64> = nuisance_idx.iter().map(|&i| init[i]).collect();
    let mut points = Vec::new();
    for value in g.points() {
        let mut starts = vec![warm.clone()];
        if !warm.is_empty() {
            for _ in 1..g.nuisance_starts {
                starts.push(warm.iter().map(|w| w + noise.sample(&mut rng)).collect());
            }
        }
        let best = profile_minimize(
            |nu| test(&full(value, nu)).map_or(f64::INFINITY, |(s, c)| s - c),
            &starts,
            g.max_iter,
            g.tol,
        );
        let at = test(&full(value, &best.argmin));
        if at.is_ok() {
            warm = best.argmin.clone();
        }
        points.push(grid_point(value, at));
    }
    Ok(ConfidenceSet::from_points(points))
}
