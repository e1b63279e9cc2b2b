//! Shared numerical primitives: quadrature and one-dimensional root finding.

use crate::error::{Error, Result};

/// Trapezoid rule for `f` sampled on the uniform grid covering `[0, t]` with
/// step `h` (final partial step included). Exact for constant integrands.
pub fn trapezoid(f: impl Fn(f64) -> f64, t: f64, h: f64) -> f64 {
    assert!(h > 0.0 && t >= 0.0);
    if t == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut s = 0.0;
    let mut fs = f(0.0);
    while s < t {
        let step = h.min(t - s);
        let s_next = s + step;
        let f_next = f(s_next);
        acc += 0.5 * (fs + f_next) * step;
        s = s_next;
        fs = f_next;
    }
    acc
}

/// Adaptive Simpson quadrature on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol * 0.5, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol * 0.5, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(&f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Bisection for `f(x) = 0` on a bracketing interval `[lo, hi]` with
/// `f(lo)` and `f(hi)` of opposite sign, to absolute tolerance `tol` in `x`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::Domain(format!(
            "bisection bracket [{lo}, {hi}] does not change sign"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fmid = f(mid);
        if fmid == 0.0 || hi - lo < tol {
            return Ok(mid);
        }
        if fmid.signum() == flo.signum() {
            lo = mid;
            flo = fmid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Find `x >= start` with `f(x)` of opposite sign to `f(start)` by doubling
/// the window width, then bisect. Fails once the window exceeds `cap`.
pub fn grow_and_bisect(
    f: impl Fn(f64) -> f64,
    start: f64,
    initial_width: f64,
    cap: f64,
    tol: f64,
) -> Result<f64> {
    let f0 = f(start);
    if f0 == 0.0 {
        return Ok(start);
    }
    let mut width = initial_width;
    let mut lo = start;
    loop {
        let hi = start + width;
        if hi > cap {
            return Err(Error::Domain(format!(
                "no sign change of target function below cap {cap}"
            )));
        }
        let fhi = f(hi);
        if fhi == 0.0 {
            return Ok(hi);
        }
        if fhi.signum() != f0.signum() {
            return bisect(f, lo, hi, tol);
        }
        lo = hi;
        width *= 2.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_exact_for_constants_and_linear() {
        let c = trapezoid(|_| 3.5, 2.0, 1e-3);
        assert!((c - 7.0).abs() < 1e-12);
        let lin = trapezoid(|s| 2.0 * s, 1.0, 1e-3);
        assert!((lin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trapezoid_partial_last_step() {
        // t not a multiple of h.
        let v = trapezoid(|_| 1.0, 0.0015, 1e-3);
        assert!((v - 0.0015).abs() < 1e-15);
    }

    #[test]
    fn simpson_converges_on_smooth_integrand() {
        let v = adaptive_simpson(|x| (-x).exp(), 0.0, 5.0, 1e-12);
        assert!((v - (1.0 - (-5.0f64).exp())).abs() < 1e-10);
    }

    #[test]
    fn bisect_and_bracket_growth() {
        let root = grow_and_bisect(|x| x * x - 2.0, 0.0, 1.0, 100.0, 1e-13).unwrap();
        assert!((root - 2.0f64.sqrt()).abs() < 1e-12);
        assert!(grow_and_bisect(|x| x + 1.0, 0.0, 1.0, 8.0, 1e-12).is_err());
    }
}
