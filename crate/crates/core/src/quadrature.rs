//! Adaptive Simpson quadrature.

use crate::error::{DmoeError, Result};

const MAX_DEPTH: u32 = 50;
/// Per-interval tolerances are never split below this, so jumps in the
/// integrand do not exhaust the recursion.
const MIN_LOCAL_TOL: f64 = 1e-17;

/// Integrates `f` on `[a, b]` to absolute tolerance `tol`.
///
/// Fails with [`DmoeError::Numerical`] if the recursion bottoms out before the
/// local error estimate drops below its share of the tolerance, or if the
/// integrand produces a non-finite value.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    let value = recurse(f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH)?;
    if !value.is_finite() {
        return Err(DmoeError::Numerical(format!(
            "non-finite integral on [{a}, {b}]"
        )));
    }
    Ok(value)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol.max(MIN_LOCAL_TOL) {
        return Ok(left + right + delta / 15.0);
    }
    // interval too small to split further in f64
    if depth == 0 || m <= a || m >= b {
        return Err(DmoeError::Numerical(format!(
            "adaptive Simpson did not converge on [{a}, {b}] (error estimate {})",
            delta.abs() / 15.0
        )));
    }
    Ok(recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
        + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let v = adaptive_simpson(&|x: f64| x * x * x - 2.0 * x, 0.0, 2.0, 1e-12).unwrap();
        assert!((v - 0.0).abs() < 1e-12);
    }

    #[test]
    fn handles_kinks() {
        let v = adaptive_simpson(&|x: f64| (x - 0.3).abs(), 0.0, 1.0, 1e-10).unwrap();
        let exact = 0.5 * 0.3 * 0.3 + 0.5 * 0.7 * 0.7;
        assert!((v - exact).abs() < 1e-9, "{v}");
    }

    #[test]
    fn gaussian_mass() {
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let v = adaptive_simpson(&pdf, -8.0, 8.0, 1e-12).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
    }

    #[test]
    fn nan_is_an_error() {
        assert!(adaptive_simpson(&|_x: f64| f64::NAN, 0.0, 1.0, 1e-8).is_err());
    }
}
