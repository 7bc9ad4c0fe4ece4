//! Adaptive Simpson quadrature used for hazard integrals.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("quadrature on [{a}, {b}] did not reach tolerance {tol}")]
pub struct QuadratureFailure {
    pub a: f64,
    pub b: f64,
    pub tol: f64,
}

/// Absolute tolerance applied to every hazard integral.
pub const HAZARD_TOL: f64 = 1e-9;

const MAX_DEPTH: u32 = 48;

/// Integrates `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, tol: f64) -> Result<f64, QuadratureFailure>
where
    F: Fn(f64) -> f64,
{
    if a == b {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let fa = f(lo);
    let fb = f(hi);
    let m = 0.5 * (lo + hi);
    let fm = f(m);
    let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
    let v = recurse(&f, lo, hi, fa, fm, fb, whole, tol, MAX_DEPTH).ok_or(QuadratureFailure {
        a,
        b,
        tol,
    })?;
    if v.is_finite() {
        Ok(sign * v)
    } else {
        Err(QuadratureFailure { a, b, tol })
    }
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
) -> Option<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Some(left + right + delta / 15.0);
    }
    if depth == 0 {
        return None;
    }
    let l = recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let r = recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Some(l + r)
}
