//! Adaptive composite Simpson quadrature.
//!
//! The transform construction integrates coefficients that are smooth on
//! each side of the hyperplane `{x1 = 0}` but jump across it, so every
//! integral is split at 0 before the adaptive rule runs.

use crate::math;
use crate::{Error, Result};
use alloc::format;

const MAX_DEPTH: u32 = 60;

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`.
///
/// Uses adaptive interval bisection with the classical `S(a,b)` vs
/// `S(a,m) + S(m,b)` comparison and Richardson correction. Fails if the
/// recursion cannot reach the tolerance or the integrand turns non-finite.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fm = f(0.5 * (a + b));
    let fb = f(b);
    if !(fa.is_finite() && fm.is_finite() && fb.is_finite()) {
        return Err(Error::Quadrature(format!(
            "integrand not finite on [{a}, {b}]"
        )));
    }
    let whole = simpson(a, b, fa, fm, fb);
    recurse(f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH)
}

/// Integrates over `[a, b]`, splitting the interval at 0 when it straddles
/// the origin so the two one-sided pieces are each smooth.
pub fn integrate_split_at_zero<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a < 0.0 && b > 0.0 {
        let left = adaptive_simpson(f, a, 0.0, 0.5 * tol)?;
        let right = adaptive_simpson(f, 0.0, b, 0.5 * tol)?;
        Ok(left + right)
    } else if b < 0.0 && a > 0.0 {
        let left = adaptive_simpson(f, a, 0.0, 0.5 * tol)?;
        let right = adaptive_simpson(f, 0.0, b, 0.5 * tol)?;
        Ok(left + right)
    } else {
        adaptive_simpson(f, a, b, tol)
    }
}

#[inline]
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
    if !(flm.is_finite() && frm.is_finite()) {
        return Err(Error::Quadrature(format!(
            "integrand not finite near [{lm}, {rm}]"
        )));
    }
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if math::abs(delta) <= 15.0 * tol || math::abs(b - a) < 1e-14 * (1.0 + math::abs(a)) {
        let value = left + right + delta / 15.0;
        if !value.is_finite() {
            return Err(Error::Quadrature(format!(
                "integral not finite on [{a}, {b}]"
            )));
        }
        return Ok(value);
    }
    if depth == 0 {
        return Err(Error::Quadrature(format!(
            "adaptive Simpson did not converge on [{a}, {b}] (residual {delta:e}, tol {tol:e})"
        )));
    }
    let l = recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let r = recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Ok(l + r)
}
