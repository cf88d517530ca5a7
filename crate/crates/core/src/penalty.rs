//! Running-cost penalties on control amplitudes, polar coordinate transforms
//! and the bound-folding change of variables.
//!
//! Penalties act on the flattened control vector of a [`ControlSet`]
//! (slice-major, control-minor) and are averaged over the number of slices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grape::ControlSet;
use crate::linalg::RMat;

/// Smallest polar radius at which derivative transforms are defined.
pub const R_MIN: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PenaltyError {
    #[error("polar transform is singular at r = {0:e}")]
    SingularPoint(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid penalty: {0}")]
    Invalid(String),
}

/// Penalty value with gradient and Hessian over the flattened controls.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyValue {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: RMat,
}

impl PenaltyValue {
    pub fn zeros(n: usize) -> Self {
        PenaltyValue {
            value: 0.0,
            gradient: vec![0.0; n],
            hessian: RMat::zeros(n, n),
        }
    }

    fn add_scaled(&mut self, other: &PenaltyValue, w: f64) {
        self.value += w * other.value;
        for (a, b) in self.gradient.iter_mut().zip(&other.gradient) {
            *a += w * b;
        }
        self.hessian += &other.hessian * w;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    NormSquare,
    SpilloutSquare,
    SpilloutCube,
    Smoothing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// Difference order for smoothing, 1 or 2.
    #[serde(default = "default_order")]
    pub order: usize,
}

fn default_weight() -> f64 {
    1.0
}

fn default_order() -> usize {
    1
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, weight: f64) -> Self {
        PenaltySpec { kind, weight, order: 1 }
    }

    pub fn validate(&self) -> Result<(), PenaltyError> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(PenaltyError::Invalid(format!("weight {} must be nonnegative", self.weight)));
        }
        if self.kind == PenaltyKind::Smoothing && !(1..=2).contains(&self.order) {
            return Err(PenaltyError::Invalid(format!("smoothing order {} must be 1 or 2", self.order)));
        }
        Ok(())
    }

    /// Weighted penalty value and derivatives.
    pub fn evaluate(&self, c: &ControlSet) -> Result<PenaltyValue, PenaltyError> {
        self.validate()?;
        let mut p = match self.kind {
            PenaltyKind::NormSquare => norm_square(c),
            PenaltyKind::SpilloutSquare => spillout(c, 2)?,
            PenaltyKind::SpilloutCube => spillout(c, 3)?,
            PenaltyKind::Smoothing => smoothing(c, &difference_operator(c.slices(), self.order)?)?,
        };
        p.value *= self.weight;
        p.gradient.iter_mut().for_each(|g| *g *= self.weight);
        p.hessian *= self.weight;
        Ok(p)
    }
}

/// Sum of weighted penalties.
pub fn total(specs: &[PenaltySpec], c: &ControlSet) -> Result<PenaltyValue, PenaltyError> {
    let mut sum = PenaltyValue::zeros(c.len());
    for s in specs {
        sum.add_scaled(&s.evaluate(c)?, 1.0);
    }
    Ok(sum)
}

/// `K = (1/N) sum c^2`.
pub fn norm_square(c: &ControlSet) -> PenaltyValue {
    let n = c.slices() as f64;
    let x = c.flat();
    PenaltyValue {
        value: x.iter().map(|v| v * v).sum::<f64>() / n,
        gradient: x.iter().map(|v| 2.0 * v / n).collect(),
        hessian: RMat::identity(x.len(), x.len()) * (2.0 / n),
    }
}

/// `K = (1/N) sum (|c| - 1)^p` over amplitudes with `|c| > 1`.
pub fn spillout(c: &ControlSet, exponent: u32) -> Result<PenaltyValue, PenaltyError> {
    if !(2..=3).contains(&exponent) {
        return Err(PenaltyError::Invalid(format!("spillout exponent {exponent} must be 2 or 3")));
    }
    let n = c.slices() as f64;
    let x = c.flat();
    let p = exponent as i32;
    let pf = exponent as f64;
    let mut out = PenaltyValue::zeros(x.len());
    for (i, &v) in x.iter().enumerate() {
        let e = v.abs() - 1.0;
        if e > 0.0 {
            out.value += e.powi(p) / n;
            out.gradient[i] = pf * e.powi(p - 1) * v.signum() / n;
            out.hessian[(i, i)] = pf * (pf - 1.0) * e.powi(p - 2) / n;
        }
    }
    Ok(out)
}

/// Square difference operator: first-order forward differences with a zero
/// final row, or second-order central differences with zero end rows.
pub fn difference_operator(n: usize, order: usize) -> Result<RMat, PenaltyError> {
    let mut d = RMat::zeros(n, n);
    match order {
        1 => {
            for i in 0..n.saturating_sub(1) {
                d[(i, i)] = -1.0;
                d[(i, i + 1)] = 1.0;
            }
        }
        2 => {
            for i in 1..n.saturating_sub(1) {
                d[(i, i - 1)] = 1.0;
                d[(i, i)] = -2.0;
                d[(i, i + 1)] = 1.0;
            }
        }
        _ => return Err(PenaltyError::Invalid(format!("difference order {order} must be 1 or 2"))),
    }
    Ok(d)
}

/// `K = (1/N) sum_k ||D c_k||^2` over channels `c_k`.
pub fn smoothing(c: &ControlSet, delta: &RMat) -> Result<PenaltyValue, PenaltyError> {
    let ns = c.slices();
    let nk = c.controls();
    if delta.ncols() != ns {
        return Err(PenaltyError::Dimension(format!(
            "difference operator has {} columns for {ns} slices",
            delta.ncols()
        )));
    }
    let n = ns as f64;
    let dtd = delta.transpose() * delta;
    let mut out = PenaltyValue::zeros(c.len());
    for k in 0..nk {
        let ch = nalgebra::DVector::from_vec(c.channel(k));
        let dc = delta * &ch;
        out.value += dc.norm_squared() / n;
        let g = &dtd * &ch * (2.0 / n);
        for i in 0..ns {
            out.gradient[c.index(k, i)] = g[i];
            for j in 0..ns {
                out.hessian[(c.index(k, i), c.index(k, j))] = 2.0 * dtd[(i, j)] / n;
            }
        }
    }
    Ok(out)
}

/// `(x, y) -> (r, phi)` with `phi` in `(-pi, pi]`.
pub fn to_polar(x: f64, y: f64) -> (f64, f64) {
    (x.hypot(y), y.atan2(x))
}

pub fn from_polar(r: f64, phi: f64) -> (f64, f64) {
    let (s, c) = phi.sin_cos();
    (r * c, r * s)
}

fn check_radius(r: f64) -> Result<(), PenaltyError> {
    if r < R_MIN || !r.is_finite() {
        Err(PenaltyError::SingularPoint(r))
    } else {
        Ok(())
    }
}

/// Jacobian `d(x, y)/d(r, phi)` as rows `[dx/dr, dx/dphi]`, `[dy/dr, dy/dphi]`.
fn polar_jacobian(r: f64, phi: f64) -> [[f64; 2]; 2] {
    let (s, c) = phi.sin_cos();
    [[c, -r * s], [s, r * c]]
}

/// Second derivatives of `x` and `y` with respect to `(r, phi)`.
fn polar_curvature(r: f64, phi: f64) -> [[[f64; 2]; 2]; 2] {
    let (s, c) = phi.sin_cos();
    [[[0.0, -s], [-s, -r * c]], [[0.0, c], [c, -r * s]]]
}

/// Cartesian gradient `(gx, gy)` at `(x, y)` to `(d/dr, d/dphi)`.
pub fn gradient_to_polar(x: f64, y: f64, g: [f64; 2]) -> Result<[f64; 2], PenaltyError> {
    let (r, phi) = to_polar(x, y);
    check_radius(r)?;
    let j = polar_jacobian(r, phi);
    Ok([j[0][0] * g[0] + j[1][0] * g[1], j[0][1] * g[0] + j[1][1] * g[1]])
}

/// Polar gradient at `(r, phi)` to `(d/dx, d/dy)`.
pub fn gradient_from_polar(r: f64, phi: f64, g: [f64; 2]) -> Result<[f64; 2], PenaltyError> {
    check_radius(r)?;
    let (s, c) = phi.sin_cos();
    Ok([c * g[0] - s / r * g[1], s * g[0] + c / r * g[1]])
}

/// Cartesian Hessian block at `(x, y)` with gradient `g` to polar coordinates.
pub fn hessian_to_polar(x: f64, y: f64, g: [f64; 2], h: [[f64; 2]; 2]) -> Result<[[f64; 2]; 2], PenaltyError> {
    let (r, phi) = to_polar(x, y);
    check_radius(r)?;
    let j = polar_jacobian(r, phi);
    let q = polar_curvature(r, phi);
    let mut out = [[0.0; 2]; 2];
    for (a, row) in out.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            for u in 0..2 {
                for w in 0..2 {
                    *v += j[u][a] * h[u][w] * j[w][b];
                }
                *v += g[u] * q[u][a][b];
            }
        }
    }
    Ok(out)
}

/// Polar Hessian block at `(r, phi)` with polar gradient `g` to Cartesian.
pub fn hessian_from_polar(r: f64, phi: f64, g: [f64; 2], h: [[f64; 2]; 2]) -> Result<[[f64; 2]; 2], PenaltyError> {
    check_radius(r)?;
    let gc = gradient_from_polar(r, phi, g)?;
    let q = polar_curvature(r, phi);
    let mut m = h;
    for (a, row) in m.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            for u in 0..2 {
                *v -= gc[u] * q[u][a][b];
            }
        }
    }
    // inverse Jacobian d(r, phi)/d(x, y)
    let (s, c) = phi.sin_cos();
    let ji = [[c, s], [-s / r, c / r]];
    let mut out = [[0.0; 2]; 2];
    for (a, row) in out.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            for u in 0..2 {
                for w in 0..2 {
                    *v += ji[u][a] * m[u][w] * ji[w][b];
                }
            }
        }
    }
    Ok(out)
}

/// Folds any real amplitude into `[-1, 1]` by reflection at the bounds.
pub fn fold_bound(c: f64) -> f64 {
    (c - 4.0 * ((c - 1.0) / 4.0).floor() - 3.0).abs() - 1.0
}

/// Phase-only parameterization of `(x, y)` control pairs with fixed
/// per-slice amplitudes. Variables are ordered slice-major, pair-minor.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseOnly {
    pairs: Vec<(usize, usize)>,
    /// `[n * pairs + p]`
    amplitudes: Vec<f64>,
    template: ControlSet,
}

impl PhaseOnly {
    /// Builds the parameterization from Cartesian controls and returns it
    /// with the current phases.
    pub fn from_controls(controls: &ControlSet, pairs: Vec<(usize, usize)>) -> Result<(Self, Vec<f64>), PenaltyError> {
        if pairs.is_empty() {
            return Err(PenaltyError::Invalid("phase-only mode needs at least one control pair".into()));
        }
        let mut seen = vec![false; controls.controls()];
        for &(a, b) in &pairs {
            for k in [a, b] {
                if k >= controls.controls() || seen[k] {
                    return Err(PenaltyError::Invalid(format!("control {k} is out of range or paired twice")));
                }
                seen[k] = true;
            }
        }
        let mut amplitudes = Vec::with_capacity(pairs.len() * controls.slices());
        let mut phases = Vec::with_capacity(amplitudes.capacity());
        for n in 0..controls.slices() {
            for &(a, b) in &pairs {
                let (r, phi) = to_polar(controls.get(a, n), controls.get(b, n));
                check_radius(r)?;
                amplitudes.push(r);
                phases.push(phi);
            }
        }
        let p = PhaseOnly {
            pairs,
            amplitudes,
            template: controls.clone(),
        };
        Ok((p, phases))
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    /// Cartesian controls for the given phases. Unpaired channels keep their
    /// template values.
    pub fn controls(&self, phases: &[f64]) -> Result<ControlSet, PenaltyError> {
        self.check(phases)?;
        let mut c = self.template.clone();
        let np = self.pairs.len();
        for n in 0..c.slices() {
            for (p, &(a, b)) in self.pairs.iter().enumerate() {
                let i = n * np + p;
                let (x, y) = from_polar(self.amplitudes[i], phases[i]);
                c.set(a, n, x);
                c.set(b, n, y);
            }
        }
        Ok(c)
    }

    fn check(&self, phases: &[f64]) -> Result<(), PenaltyError> {
        if phases.len() != self.dim() {
            return Err(PenaltyError::Dimension(format!("{} phases, expected {}", phases.len(), self.dim())));
        }
        Ok(())
    }

    /// `d/dphi` of each variable: `(dx/dphi, dy/dphi) = (-y, x)`.
    fn tangents(&self, phases: &[f64]) -> Vec<(usize, usize, f64, f64)> {
        let np = self.pairs.len();
        let nk = self.template.controls();
        (0..self.dim())
            .map(|i| {
                let (n, p) = (i / np, i % np);
                let (a, b) = self.pairs[p];
                let (x, y) = from_polar(self.amplitudes[i], phases[i]);
                (n * nk + a, n * nk + b, -y, x)
            })
            .collect()
    }

    /// Gradient with respect to the phases from the Cartesian gradient.
    pub fn gradient(&self, phases: &[f64], cartesian: &[f64]) -> Result<Vec<f64>, PenaltyError> {
        self.check(phases)?;
        Ok(self
            .tangents(phases)
            .into_iter()
            .map(|(ia, ib, tx, ty)| tx * cartesian[ia] + ty * cartesian[ib])
            .collect())
    }

    /// Hessian with respect to the phases: `J^T H J + diag(g . d2c)`.
    pub fn hessian(&self, phases: &[f64], cartesian_gradient: &[f64], cartesian_hessian: &RMat) -> Result<RMat, PenaltyError> {
        self.check(phases)?;
        let t = self.tangents(phases);
        let m = t.len();
        let mut h = RMat::zeros(m, m);
        for (j, &(ja, jb, jx, jy)) in t.iter().enumerate() {
            for (i, &(ia, ib, ix, iy)) in t.iter().enumerate().skip(j) {
                let v = ix * (cartesian_hessian[(ia, ja)] * jx + cartesian_hessian[(ia, jb)] * jy)
                    + iy * (cartesian_hessian[(ib, ja)] * jx + cartesian_hessian[(ib, jb)] * jy);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
            // d2x/dphi2 = -x, d2y/dphi2 = -y
            h[(j, j)] -= jy * cartesian_gradient[ja] - jx * cartesian_gradient[jb];
        }
        Ok(h)
    }
}
