//! Quasi-Newton curvature updates. `B` approximates the negated Hessian of the
//! maximized objective, so with `s = x_new - x_old` and
//! `y = -(g_new - g_old)` the secant condition reads `B' s = y`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative threshold for skipping ill-posed updates.
pub const SKIP_TOL: f64 = 1e-8;

/// Symmetric rank-one update; `None` when the denominator is too small.
pub fn sr1_update(b: &Mat, s: &Vector, y: &Vector) -> Option<Mat> {
    let r = y - b * s;
    let den = r.dot(s);
    if den.abs() < SKIP_TOL * s.norm() * r.norm() || den == 0.0 {
        return None;
    }
    Some(b + &r * r.transpose() / den)
}

fn curvature_ok(s: &Vector, y: &Vector) -> bool {
    let sy = s.dot(y);
    sy > SKIP_TOL * s.norm() * y.norm() && sy > 0.0
}

/// Broyden-family update: `(1 - phi) DFP + phi BFGS`. `None` when the
/// curvature condition fails.
pub fn broyden_update(b: &Mat, s: &Vector, y: &Vector, phi: f64) -> Option<Mat> {
    if !curvature_ok(s, y) {
        return None;
    }
    let bs = b * s;
    let sbs = s.dot(&bs);
    let ys = y.dot(s);
    if sbs <= 0.0 {
        return None;
    }
    let bfgs = b - &bs * bs.transpose() / sbs + y * y.transpose() / ys;
    let v = y / ys - &bs / sbs;
    Some(bfgs + (1.0 - phi) * sbs * &v * v.transpose())
}

/// Inverse Broyden-family update of `H ~ B^-1`: `(1 - phi)` inverse DFP plus
/// `phi` inverse BFGS, so that `H' y = s`.
pub fn inverse_broyden_update(h: &Mat, s: &Vector, y: &Vector, phi: f64) -> Option<Mat> {
    if !curvature_ok(s, y) {
        return None;
    }
    let ys = y.dot(s);
    let hy = h * y;
    let yhy = y.dot(&hy);
    let ss = s * s.transpose() / ys;
    let mut out = Mat::zeros(h.nrows(), h.ncols());
    if phi != 1.0 {
        if yhy <= 0.0 {
            return None;
        }
        let dfp = h - &hy * hy.transpose() / yhy + &ss;
        out += dfp * (1.0 - phi);
    }
    if phi != 0.0 {
        let rho = 1.0 / ys;
        let shy = s * hy.transpose() * rho;
        let bfgs = h - &shy - shy.transpose() + s * s.transpose() * (rho * rho * yhy) + &ss;
        out += bfgs * phi;
    }
    Some(out)
}

/// Limited-memory history of curvature pairs.
#[derive(Clone, Debug)]
pub struct Lbfgs {
    memory: usize,
    pairs: VecDeque<(Vector, Vector)>,
}

impl Lbfgs {
    pub fn new(memory: usize) -> Self {
        Lbfgs {
            memory: memory.max(1),
            pairs: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stores the pair if it satisfies the curvature condition.
    pub fn push(&mut self, s: Vector, y: Vector) -> bool {
        if !curvature_ok(&s, &y) {
            return false;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y));
        true
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Two-loop recursion for `H g` with `H0 = (s.y / y.y) I` from the newest pair.
    pub fn direction(&self, g: &Vector) -> Vector {
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y) in self.pairs.iter().rev() {
            let a = s.dot(&q) / y.dot(s);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        if let Some((s, y)) = self.pairs.back() {
            q *= s.dot(y) / y.dot(y);
        }
        for ((s, y), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = y.dot(&q) / y.dot(s);
            q.axpy(a - b, s, 1.0);
        }
        q
    }
}
