//! Line searches in the maximization convention: `phi(alpha) = J(x + alpha d)`
//! with `phi'(0) = <g, d> > 0`.

use super::OptimError;

/// Value and, when requested, slope of the objective along the search line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trial {
    pub value: f64,
    pub slope: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchOutcome {
    pub alpha: f64,
    pub value: f64,
    /// Objective evaluations spent, including slope evaluations.
    pub evals: usize,
}

/// Parameters of the bracketing and sectioning search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WolfeParams {
    pub c1: f64,
    pub c2: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub max_evals: usize,
}

impl Default for WolfeParams {
    fn default() -> Self {
        WolfeParams {
            c1: 1e-4,
            c2: 0.9,
            tau1: 3.0,
            tau2: 0.1,
            tau3: 0.5,
            max_evals: 30,
        }
    }
}

pub const BACKTRACKING_CAP: usize = 50;

fn check_ascent(slope0: f64) -> Result<(), OptimError> {
    if slope0 > 0.0 && slope0.is_finite() {
        Ok(())
    } else {
        Err(OptimError::NotAscent(slope0))
    }
}

/// Armijo backtracking: the first `alpha0 * beta^j` with
/// `phi(alpha) >= phi(0) + c1 alpha phi'(0)`.
pub fn backtracking<F>(
    mut phi: F,
    f0: f64,
    slope0: f64,
    alpha0: f64,
    beta: f64,
    c1: f64,
) -> Result<LineSearchOutcome, OptimError>
where
    F: FnMut(f64) -> Result<f64, OptimError>,
{
    check_ascent(slope0)?;
    let mut alpha = alpha0;
    for j in 0..=BACKTRACKING_CAP {
        let v = phi(alpha)?;
        if v.is_finite() && v >= f0 + c1 * alpha * slope0 {
            return Ok(LineSearchOutcome {
                alpha,
                value: v,
                evals: j + 1,
            });
        }
        alpha *= beta;
    }
    Err(OptimError::LineSearch(format!(
        "no Armijo step after {BACKTRACKING_CAP} reductions"
    )))
}

/// Minimizer over `[lo, hi]` of the cubic (or quadratic when `db` is absent)
/// interpolating `f(a), f'(a), f(b), f'(b)`. Falls back to the midpoint.
fn interpolate(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: Option<f64>, lo: f64, hi: f64) -> f64 {
    let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let mid = 0.5 * (lo + hi);
    let w = b - a;
    if w == 0.0 || !w.is_finite() {
        return mid;
    }
    let d0 = da * w;
    let df = fb - fa;
    let (c2, c3) = match db {
        Some(db) => {
            let d1 = db * w;
            (3.0 * df - 2.0 * d0 - d1, d0 + d1 - 2.0 * df)
        }
        None => (df - d0, 0.0),
    };
    let poly = |z: f64| fa + z * (d0 + z * (c2 + z * c3));
    let (zl, zh) = {
        let (p, q) = ((lo - a) / w, (hi - a) / w);
        if p <= q {
            (p, q)
        } else {
            (q, p)
        }
    };
    let mut cands = vec![zl, zh];
    // p'(z) = d0 + 2 c2 z + 3 c3 z^2
    if c3.abs() > 1e-300 {
        let disc = c2 * c2 - 3.0 * c3 * d0;
        if disc >= 0.0 {
            let s = disc.sqrt();
            cands.push((-c2 + s) / (3.0 * c3));
            cands.push((-c2 - s) / (3.0 * c3));
        }
    } else if c2.abs() > 1e-300 {
        cands.push(-d0 / (2.0 * c2));
    }
    let mut best = None;
    for z in cands {
        if !(z.is_finite() && z >= zl && z <= zh) {
            continue;
        }
        let v = poly(z);
        if !v.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, bv)| v < bv) {
            best = Some((z, v));
        }
    }
    match best {
        Some((z, _)) => {
            let x = a + z * w;
            if x.is_finite() {
                x.clamp(lo, hi)
            } else {
                mid
            }
        }
        None => mid,
    }
}

/// Bracketing and sectioning search terminating on the strong Wolfe
/// conditions. `upper` is an optional bound on the objective; reaching it
/// ends the search.
pub fn bracket_section<F>(
    mut phi: F,
    f0: f64,
    slope0: f64,
    alpha1: f64,
    p: &WolfeParams,
    upper: Option<f64>,
) -> Result<LineSearchOutcome, OptimError>
where
    F: FnMut(f64, bool) -> Result<Trial, OptimError>,
{
    check_ascent(slope0)?;
    // minimize psi = -phi
    let psi0 = -f0;
    let d0 = -slope0;
    let bar = upper.map(|u| -u).unwrap_or(f64::NEG_INFINITY);
    let mu = if bar.is_finite() {
        (bar - psi0) / (p.c1 * d0)
    } else {
        f64::INFINITY
    };
    let mut evals = 0usize;
    let mut call = |alpha: f64, slope: bool, evals: &mut usize| -> Result<(f64, Option<f64>), OptimError> {
        if *evals >= p.max_evals {
            return Err(OptimError::LineSearch(format!(
                "strong Wolfe point not found within {} evaluations",
                p.max_evals
            )));
        }
        *evals += 1;
        let t = phi(alpha, slope)?;
        Ok((-t.value, t.slope.map(|s| -s)))
    };
    let done = |alpha: f64, v: f64, evals: usize| LineSearchOutcome {
        alpha,
        value: -v,
        evals,
    };

    let (mut prev, mut fprev, mut dprev) = (0.0, psi0, d0);
    let mut alpha = alpha1.min(mu);
    // (a, f(a), f'(a)), (b, f(b), f'(b) if known)
    let (mut a, mut fa, mut da, mut b, mut fb, mut db);
    loop {
        let (v, _) = call(alpha, false, &mut evals)?;
        if v <= bar {
            return Ok(done(alpha, v, evals));
        }
        if !v.is_finite() || v > psi0 + p.c1 * alpha * d0 || v >= fprev {
            (a, fa, da, b, fb, db) = (prev, fprev, dprev, alpha, v, None);
            break;
        }
        let (v, s) = call(alpha, true, &mut evals)?;
        let s = s.ok_or_else(|| OptimError::LineSearch("slope unavailable".into()))?;
        if s.abs() <= -p.c2 * d0 {
            return Ok(done(alpha, v, evals));
        }
        if s >= 0.0 {
            (a, fa, da, b, fb, db) = (alpha, v, s, prev, fprev, Some(dprev));
            break;
        }
        let next = if mu <= 2.0 * alpha - prev {
            mu
        } else {
            let lo = 2.0 * alpha - prev;
            let hi = mu.min(alpha + p.tau1 * (alpha - prev));
            interpolate(prev, fprev, dprev, alpha, v, Some(s), lo, hi)
        };
        (prev, fprev, dprev) = (alpha, v, s);
        alpha = next;
    }

    loop {
        let lo = a + p.tau2 * (b - a);
        let hi = b - p.tau3 * (b - a);
        let alpha = interpolate(a, fa, da, b, fb, db, lo, hi);
        if (alpha - a).abs() <= f64::EPSILON * a.abs().max(1.0) {
            return Err(OptimError::LineSearch("bracket collapsed".into()));
        }
        let (v, _) = call(alpha, false, &mut evals)?;
        if !v.is_finite() || v > psi0 + p.c1 * alpha * d0 || v >= fa {
            (b, fb, db) = (alpha, v, None);
            continue;
        }
        let (v, s) = call(alpha, true, &mut evals)?;
        let s = s.ok_or_else(|| OptimError::LineSearch("slope unavailable".into()))?;
        if s.abs() <= -p.c2 * d0 {
            return Ok(done(alpha, v, evals));
        }
        if (b - a) * s >= 0.0 {
            (b, fb, db) = (a, fa, Some(da));
        }
        (a, fa, da) = (alpha, v, s);
    }
}
