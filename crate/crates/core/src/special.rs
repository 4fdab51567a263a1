//! Closed-form CDFs and quantiles used for bin construction and target induction.

use libm::erfc;
use statrs::function::erf::erfc_inv;

/// Standard normal CDF, evaluated through `erfc` so both tails keep relative precision.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_cdf(x: f64, mean: f64, std: f64) -> f64 {
    std_normal_cdf((x - mean) / std)
}

pub fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
}

/// Standard normal quantile. Returns `-inf` at 0 and `+inf` at 1.
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut z = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // Newton polish against the more accurate CDF
    for _ in 0..2 {
        let dens = normal_pdf(z, 0.0, 1.0);
        if dens <= 0.0 || !z.is_finite() {
            break;
        }
        let step = if p < 0.5 {
            (std_normal_cdf(z) - p) / dens
        } else {
            ((1.0 - p) - std_normal_cdf(-z)) / dens
        };
        z -= step;
    }
    z
}

pub fn laplace_cdf(x: f64, loc: f64, scale: f64) -> f64 {
    let z = (x - loc) / scale;
    if z < 0.0 {
        0.5 * z.exp()
    } else {
        1.0 - 0.5 * (-z).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-9, 1e-4, 0.1, 0.25, 0.5, 0.8, 0.999, 1.0 - 1e-9] {
            let z = std_normal_quantile(p);
            assert!((std_normal_cdf(z) - p).abs() < 1e-12 * p.max(1e-3), "p={p}");
        }
        assert_eq!(std_normal_quantile(0.0), f64::NEG_INFINITY);
        assert_eq!(std_normal_quantile(1.0), f64::INFINITY);
    }

    #[test]
    fn laplace_is_a_cdf() {
        assert_eq!(laplace_cdf(0.0, 0.0, 1.0), 0.5);
        assert!(laplace_cdf(-50.0, 0.0, 1.0) < 1e-20);
        assert!((laplace_cdf(50.0, 0.0, 1.0) - 1.0).abs() < 1e-15);
        let mut prev = 0.0;
        for i in -100..=100 {
            let v = laplace_cdf(i as f64 * 0.1, 0.3, 0.7);
            assert!(v >= prev);
            prev = v;
        }
    }
}
