//! Hessian regularization for Newton ascent. Every routine works on the
//! curvature `M = -H`, which must be positive definite for an ascent step.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::OptimError;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Doubling stops once the shift exceeds this multiple of `||H||_F`.
pub const CHOLESKY_SHIFT_LIMIT: f64 = 1e16;
/// Smallest scaling factor tried by the conditioning loop.
pub const RFO_ALPHA_MIN: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Regularized {
    /// Regularized Hessian `H - sigma I`.
    pub hessian: Mat,
    pub shift: f64,
    pub iterations: usize,
}

/// True when `-H` admits a Cholesky factorization.
pub fn is_negative_definite(h: &Mat) -> bool {
    (-h).cholesky().is_some()
}

/// Iterative Cholesky shift: `sigma` starts from the Frobenius norm rule and
/// doubles until `-(H - sigma I)` factorizes.
pub fn cholesky_regularize(h: &Mat) -> Result<Regularized, OptimError> {
    let m = -h;
    if m.clone().cholesky().is_some() {
        return Ok(Regularized {
            hessian: h.clone(),
            shift: 0.0,
            iterations: 0,
        });
    }
    let fro = m.norm();
    let min_diag = m.diagonal().min();
    let mut sigma = if min_diag < 0.0 { fro - min_diag } else { fro };
    if !(sigma > 0.0) {
        sigma = f64::MIN_POSITIVE.sqrt();
    }
    let n = h.nrows();
    let mut iterations = 1;
    loop {
        let shifted = &m + Mat::identity(n, n) * sigma;
        if shifted.cholesky().is_some() {
            return Ok(Regularized {
                hessian: h - Mat::identity(n, n) * sigma,
                shift: sigma,
                iterations,
            });
        }
        sigma *= 2.0;
        iterations += 1;
        if !(sigma <= CHOLESKY_SHIFT_LIMIT * fro.max(f64::MIN_POSITIVE)) {
            return Err(OptimError::Regularization(format!("Cholesky shift exceeded {sigma:e}")));
        }
    }
}

/// Eigenvalue shift: curvature eigenvalues below `delta` are raised by
/// `sigma = max(0, delta - lambda_min)`.
pub fn trm_regularize(h: &Mat, delta: f64) -> Result<Regularized, OptimError> {
    if !(delta > 0.0) {
        return Err(OptimError::Config(format!("TRM delta {delta} must be positive")));
    }
    let eig = SymmetricEigen::new(-h);
    let sigma = (delta - eig.eigenvalues.min()).max(0.0);
    let n = h.nrows();
    let sym = (h + h.transpose()) * 0.5;
    Ok(Regularized {
        hessian: sym - Mat::identity(n, n) * sigma,
        shift: sigma,
        iterations: 0,
    })
}

#[derive(Clone, Debug)]
pub struct RfoStep {
    /// Ascent direction `M_reg^-1 g`.
    pub direction: Vector,
    /// Condition number of the regularized curvature.
    pub cond: f64,
    /// Final scaling factor; 1 for a pure Newton step.
    pub alpha: f64,
    /// Conditioning iterations.
    pub iterations: usize,
    /// Shift added to the curvature eigenvalues.
    pub shift: f64,
}

/// Smallest eigenvalue of `[[a2 diag(mu), -b], [-b^T, 0]]` with `mu` ascending.
fn arrowhead_min_eigenvalue(a2: f64, mu: &[f64], b: &[f64]) -> f64 {
    let hi = (a2 * mu[0]).min(0.0);
    let bn = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let lo = hi - bn - 1.0;
    // secular function, increasing below the smallest pole
    let f = |l: f64| l + b.iter().zip(mu).map(|(bi, m)| bi * bi / (a2 * m - l)).sum::<f64>();
    let top = f(hi);
    if top.is_finite() && top <= 0.0 && hi < 0.0 {
        return hi;
    }
    if bn == 0.0 {
        return hi;
    }
    let (mut l, mut h) = (lo, hi);
    while f(l) > 0.0 {
        l -= (h - l).max(1.0);
    }
    for _ in 0..200 {
        let mid = 0.5 * (l + h);
        if mid <= l || mid >= h {
            break;
        }
        let v = f(mid);
        if !v.is_finite() || v > 0.0 {
            h = mid;
        } else {
            l = mid;
        }
    }
    0.5 * (l + h)
}

/// Rational function optimization step with condition-number control.
pub fn rfo_regularize(h: &Mat, g: &Vector, max_cond: f64, phi: f64) -> Result<RfoStep, OptimError> {
    if !(max_cond > 1.0) || !(phi > 0.0 && phi < 1.0) {
        return Err(OptimError::Config("RFO needs max_cond > 1 and 0 < phi < 1".into()));
    }
    let eig = SymmetricEigen::new(-(h + h.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mu: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let q = Mat::from_fn(h.nrows(), mu.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    let gq: Vec<f64> = (q.transpose() * g).iter().copied().collect();
    let (lo, hi) = (mu[0], *mu.last().unwrap());
    let step = |shift: f64| {
        let coef = Vector::from_iterator(mu.len(), gq.iter().zip(&mu).map(|(x, m)| x / (m + shift)));
        &q * coef
    };
    let cond_of = |shift: f64| {
        if lo + shift <= 0.0 {
            f64::INFINITY
        } else {
            (hi + shift) / (lo + shift)
        }
    };
    if lo > 0.0 && cond_of(0.0) <= max_cond {
        return Ok(RfoStep {
            direction: step(0.0),
            cond: cond_of(0.0),
            alpha: 1.0,
            iterations: 0,
            shift: 0.0,
        });
    }
    if gq.iter().all(|&x| x == 0.0) {
        return Ok(RfoStep {
            direction: Vector::zeros(g.len()),
            cond: cond_of(0.0),
            alpha: 1.0,
            iterations: 0,
            shift: 0.0,
        });
    }
    let mut alpha = if lo.abs() < 1e-12 { 1.0 } else { 1.0 / lo.abs().sqrt() };
    let mut iterations = 0;
    loop {
        let a2 = alpha * alpha;
        let b: Vec<f64> = gq.iter().map(|x| alpha * x).collect();
        let lmin = arrowhead_min_eigenvalue(a2, &mu, &b);
        let shift = (-lmin).max(0.0) / a2;
        let cond = cond_of(shift);
        if cond <= max_cond {
            return Ok(RfoStep {
                direction: step(shift),
                cond,
                alpha,
                iterations,
                shift,
            });
        }
        alpha *= phi;
        iterations += 1;
        if alpha < RFO_ALPHA_MIN {
            return Err(OptimError::Regularization(format!(
                "RFO scaling fell below {RFO_ALPHA_MIN:e} with condition {cond:e}"
            )));
        }
    }
}
