//! Chi-square and normal distribution helpers.
//!
//! The chi-square CDF comes from the regularized incomplete gamma function in
//! `statrs`; the quantile is found by safeguarded Newton iteration on it.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

pub fn chi2_cdf(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    gamma_lr(0.5 * k, 0.5 * x)
}

/// Upper tail P(chi2(k) > x), computed directly for accuracy near 0.
pub fn chi2_sf(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(0.5 * k, 0.5 * x)
}

fn chi2_ln_pdf(x: f64, k: f64) -> f64 {
    let h = 0.5 * k;
    (h - 1.0) * x.ln() - 0.5 * x - h * std::f64::consts::LN_2 - ln_gamma(h)
}

/// Quantile of chi2(k) at probability `p`.
pub fn chi2_quantile(p: f64, k: f64) -> f64 {
    assert!(k > 0.0, "chi2 degrees of freedom must be positive");
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    // Work with whichever tail is smaller so that p close to 1 keeps precision.
    let upper = p > 0.5;
    let target = if upper { 1.0 - p } else { p };
    let resid = |x: f64| {
        if upper {
            target - chi2_sf(x, k)
        } else {
            chi2_cdf(x, k) - target
        }
    };

    // Wilson-Hilferty start.
    let z = normal_quantile(p);
    let c = 2.0 / (9.0 * k);
    let mut x = k * (1.0 - c + z * c.sqrt()).powi(3);
    if !(x > 0.0) || !x.is_finite() {
        x = k.max(1e-3);
    }

    let (mut lo, mut hi) = (0.0_f64, x.max(1.0));
    while resid(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    if x >= hi || x <= lo {
        x = 0.5 * (lo + hi);
    }

    for _ in 0..200 {
        let f = resid(x);
        if f == 0.0 {
            return x;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dens = chi2_ln_pdf(x, k).exp();
        let mut next = x - f / dens;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.max(1e-300) || hi - lo <= 1e-15 * hi {
            return next;
        }
        x = next;
    }
    x
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal parameters are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent oracle: plain bisection on the CDF.
    fn bisect_quantile(p: f64, k: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, k + 100.0 * (2.0 * k).sqrt() + 100.0);
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if chi2_cdf(mid, k) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_matches_bisection() {
        for &k in &[1.0, 2.0, 3.0, 5.0, 10.0, 30.0, 57.0, 200.0, 1000.0] {
            for &p in &[1e-4, 0.01, 0.05, 0.5, 0.9, 0.95, 0.99, 0.999] {
                let a = chi2_quantile(p, k);
                let b = bisect_quantile(p, k);
                assert!((a - b).abs() < 1e-8 * b.max(1.0), "k={k} p={p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn known_values() {
        assert!((chi2_quantile(0.95, 1.0) - 3.841458820694124).abs() < 1e-9);
        assert!((chi2_quantile(0.95, 10.0) - 18.307038053275146).abs() < 1e-9);
        assert!((chi2_quantile(0.99, 2.0) - 9.210340371976184).abs() < 1e-9);
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-9);
    }

    #[test]
    fn cdf_and_sf_are_complementary() {
        for &k in &[1.0, 4.0, 33.0] {
            for &x in &[0.1, 1.0, 5.0, 40.0] {
                assert!((chi2_cdf(x, k) + chi2_sf(x, k) - 1.0).abs() < 1e-12);
            }
        }
    }
}
