//! Adaptive quadrature for Levy-measure integrals.
//!
//! The measures handled here have densities that blow up at the origin
//! (infinite activity), so integrals that reach down to zero are split into
//! geometric shells and summed until the tail is below tolerance.

use crate::error::{Error, Result};

const MAX_DEPTH: usize = 52;
const MAX_SHELLS: usize = 4000;

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
}

#[allow(clippy::too_many_arguments)]
fn adapt(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    whole: f64,
    m: f64,
    fm: f64,
    tol: f64,
    depth: usize,
) -> Option<f64> {
    let (left, lm, flm) = simpson(f, a, fa, m, fm);
    let (right, rm, frm) = simpson(f, m, fm, b, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Some(left + right + delta / 15.0);
    }
    if depth == 0 {
        return None;
    }
    let l = adapt(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)?;
    let r = adapt(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)?;
    Some(l + r)
}

/// Adaptive Simpson integration of `f` on `[lo, hi]` to absolute tolerance
/// `tol`. `name` identifies the integrand in diagnostics.
pub fn integrate(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64, name: &str) -> Result<f64> {
    if hi <= lo {
        return Ok(0.0);
    }
    let fa = f(lo);
    let fb = f(hi);
    let (whole, m, fm) = simpson(f, lo, fa, hi, fb);
    adapt(f, lo, fa, hi, fb, whole, m, fm, tol, MAX_DEPTH).ok_or_else(|| Error::Quadrature {
        integrand: name.to_string(),
        lo,
        hi,
        tol,
    })
}

/// Integral of `f` on `(0, hi]` where `f` may be singular (but integrable) at
/// the origin: shells `[hi/2^{k+1}, hi/2^k]` are summed until both the last
/// shell and its geometric tail estimate drop below tolerance.
pub fn integrate_from_zero(f: &dyn Fn(f64) -> f64, hi: f64, tol: f64, name: &str) -> Result<f64> {
    if hi <= 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut upper = hi;
    let mut prev_shell = f64::INFINITY;
    for k in 0..MAX_SHELLS {
        let lower = upper * 0.5;
        let shell = integrate(f, lower, upper, tol * 0.25, name)?;
        total += shell;
        let s = shell.abs();
        if k > 0 {
            let ratio = if prev_shell > 0.0 {
                s / prev_shell
            } else {
                0.0
            };
            // geometric tail bound once shells are shrinking
            if ratio < 0.95 {
                let tail = s * ratio / (1.0 - ratio);
                if s < 0.5 * tol && tail < 0.5 * tol {
                    return Ok(total);
                }
            }
        }
        prev_shell = s.max(f64::MIN_POSITIVE);
        upper = lower;
    }
    Err(Error::Quadrature {
        integrand: format!("{name} (shell tail)"),
        lo: 0.0,
        hi,
        tol,
    })
}
