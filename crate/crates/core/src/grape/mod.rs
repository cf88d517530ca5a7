//! Fidelity, exact gradient and exact Hessian evaluation for piecewise-constant
//! bilinear control problems in Liouville space.
//!
//! Slice `n` (0-based) consumes `rho[n]` and produces `rho[n + 1]`; the
//! adjoint trajectory is `chi[n] = P_n^dagger chi[n + 1]` with `chi[N]` the
//! target. All derivatives are taken with respect to the normalized amplitudes
//! stored in [`ControlSet`], the nominal power being part of the generator.

mod basis;
mod engine;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cvec_norm, norm1, CMat, CVec, Csr, Elem, RMat, I};
use crate::matexp::{expm_action, ExpError, ExpOptions};
use basis::RealBasis;
use engine::{Prepared, Raw};

/// Threshold on `||[Hk, Hj]||_1` below which two controls are said to commute.
pub const COMMUTE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrapeError {
    #[error("invalid controls: {0}")]
    InvalidControls(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("state {index} has norm {norm}, expected 1")]
    NotNormalized { index: usize, norm: f64 },
    #[error("slice {index} out of range for {slices} slices")]
    SliceOutOfRange { index: usize, slices: usize },
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("ensemble weight {0} is not positive")]
    InvalidWeight(f64),
    #[error(transparent)]
    Exp(#[from] ExpError),
}

/// `K x N` normalized amplitudes, flattened slice-major: index `n * K + k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    controls: usize,
    slices: usize,
    amplitudes: Vec<f64>,
    /// Seconds per slice.
    pub dt: f64,
    /// Nominal power in rad/s.
    pub power: f64,
}

impl ControlSet {
    pub fn zeros(controls: usize, slices: usize, dt: f64, power: f64) -> Result<Self, GrapeError> {
        Self::from_flat(controls, slices, dt, power, vec![0.0; controls * slices])
    }

    pub fn from_flat(
        controls: usize,
        slices: usize,
        dt: f64,
        power: f64,
        amplitudes: Vec<f64>,
    ) -> Result<Self, GrapeError> {
        if controls == 0 || slices == 0 {
            return Err(GrapeError::InvalidControls("need at least one control and one slice".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(GrapeError::InvalidControls(format!("time step {dt} must be positive")));
        }
        if !(power > 0.0 && power.is_finite()) {
            return Err(GrapeError::InvalidControls(format!("power {power} must be positive")));
        }
        if amplitudes.len() != controls * slices {
            return Err(GrapeError::InvalidControls(format!(
                "{} amplitudes for {controls} controls and {slices} slices",
                amplitudes.len()
            )));
        }
        if amplitudes.iter().any(|x| !x.is_finite()) {
            return Err(GrapeError::InvalidControls("non-finite amplitude".into()));
        }
        Ok(ControlSet {
            controls,
            slices,
            amplitudes,
            dt,
            power,
        })
    }

    /// Builds from per-channel waveforms (`channels[k][n]`).
    pub fn from_channels(channels: &[Vec<f64>], dt: f64, power: f64) -> Result<Self, GrapeError> {
        let k = channels.len();
        let n = channels.first().map_or(0, |c| c.len());
        if channels.iter().any(|c| c.len() != n) {
            return Err(GrapeError::InvalidControls("ragged channels".into()));
        }
        let mut flat = vec![0.0; k * n];
        for (ki, ch) in channels.iter().enumerate() {
            for (ni, &v) in ch.iter().enumerate() {
                flat[ni * k + ki] = v;
            }
        }
        Self::from_flat(k, n, dt, power, flat)
    }

    pub fn controls(&self) -> usize {
        self.controls
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn index(&self, k: usize, n: usize) -> usize {
        n * self.controls + k
    }

    pub fn get(&self, k: usize, n: usize) -> f64 {
        self.amplitudes[self.index(k, n)]
    }

    pub fn set(&mut self, k: usize, n: usize, value: f64) {
        let i = self.index(k, n);
        self.amplitudes[i] = value;
    }

    pub fn flat(&self) -> &[f64] {
        &self.amplitudes
    }

    /// Same shape and timing with new flattened amplitudes.
    pub fn with_flat(&self, amplitudes: Vec<f64>) -> Result<Self, GrapeError> {
        Self::from_flat(self.controls, self.slices, self.dt, self.power, amplitudes)
    }

    pub fn channel(&self, k: usize) -> Vec<f64> {
        (0..self.slices).map(|n| self.get(k, n)).collect()
    }

    pub fn channels(&self) -> Vec<Vec<f64>> {
        (0..self.controls).map(|k| self.channel(k)).collect()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.slices as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FidelityKind {
    /// Complex overlap.
    J0,
    /// Real part of the overlap.
    J1,
    /// Squared modulus of the overlap.
    J2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Value,
    Gradient,
    Hessian,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub evaluations: usize,
    /// Slice propagators computed.
    pub propagators: usize,
    /// Dense propagator derivatives formed (Hessian mode).
    pub first_derivatives: usize,
    /// Same-slice second-derivative elements.
    pub second_derivatives: usize,
}

impl std::ops::AddAssign for Counters {
    fn add_assign(&mut self, o: Counters) {
        self.evaluations += o.evaluations;
        self.propagators += o.propagators;
        self.first_derivatives += o.first_derivatives;
        self.second_derivatives += o.second_derivatives;
    }
}

#[derive(Clone, Debug)]
enum Engine {
    Real(Prepared<f64>, RealBasis),
    Complex(Prepared<Complex64>),
}

/// Drift, controls and state pairs of a control problem.
#[derive(Clone, Debug)]
pub struct ControlProblem {
    drift: CMat,
    controls: Vec<CMat>,
    initial: Vec<CVec>,
    targets: Vec<CVec>,
    kind: FidelityKind,
    commutes: Vec<Vec<bool>>,
    opts: ExpOptions,
    engine: Engine,
}

impl ControlProblem {
    /// `drift` is the full Liouvillian (relaxation included as `+iR`), and the
    /// controls are commutation superoperators scaled to unit amplitude.
    pub fn new(
        drift: CMat,
        controls: Vec<CMat>,
        initial: Vec<CVec>,
        targets: Vec<CVec>,
        kind: FidelityKind,
    ) -> Result<Self, GrapeError> {
        let n = drift.nrows();
        if drift.ncols() != n {
            return Err(GrapeError::Dimension("drift is not square".into()));
        }
        if controls.is_empty() {
            return Err(GrapeError::InvalidControls("no control operators".into()));
        }
        for (k, c) in controls.iter().enumerate() {
            if c.shape() != (n, n) {
                return Err(GrapeError::Dimension(format!("control {k} has shape {:?}", c.shape())));
            }
        }
        if initial.is_empty() || initial.len() != targets.len() {
            return Err(GrapeError::Dimension(format!(
                "{} initial states and {} targets",
                initial.len(),
                targets.len()
            )));
        }
        for (i, v) in initial.iter().chain(targets.iter()).enumerate() {
            if v.len() != n {
                return Err(GrapeError::Dimension(format!("state {i} has length {}", v.len())));
            }
            let norm = cvec_norm(v);
            if (norm - 1.0).abs() > 1e-12 {
                return Err(GrapeError::NotNormalized { index: i, norm });
            }
        }
        if drift.iter().chain(controls.iter().flat_map(|c| c.iter())).any(|z| !z.is_finite()) {
            return Err(GrapeError::Exp(ExpError::NonFinite));
        }
        let commutes = controls
            .iter()
            .map(|a| {
                controls
                    .iter()
                    .map(|b| norm1(&(a * b - b * a)) < COMMUTE_TOL)
                    .collect()
            })
            .collect();
        let engine = build_engine(&drift, &controls, &initial, &targets);
        Ok(ControlProblem {
            drift,
            controls,
            initial,
            targets,
            kind,
            commutes,
            opts: ExpOptions::default(),
            engine,
        })
    }

    pub fn with_kind(&self, kind: FidelityKind) -> Self {
        ControlProblem { kind, ..self.clone() }
    }

    /// Copy that propagates in the original basis with complex arithmetic.
    pub fn with_complex_arithmetic(&self) -> Self {
        let engine = Engine::Complex(
            prepare::<Complex64>(&self.drift, &self.controls, self.initial.clone(), self.targets.clone())
                .expect("complex representation always exists"),
        );
        ControlProblem { engine, ..self.clone() }
    }

    pub fn with_exp_options(&self, opts: ExpOptions) -> Self {
        ControlProblem { opts, ..self.clone() }
    }

    /// Copy with every control operator multiplied by `factor` (power
    /// miscalibration).
    pub fn with_power_scale(&self, factor: f64) -> Result<Self, GrapeError> {
        let c = Complex64::new(factor, 0.0);
        let controls = self.controls.iter().map(|m| m * c).collect();
        let p = Self::new(self.drift.clone(), controls, self.initial.clone(), self.targets.clone(), self.kind)?;
        Ok(p.with_exp_options(self.opts))
    }

    /// Copy with `extra` added to the drift (for example an offset term).
    pub fn with_extra_drift(&self, extra: &CMat) -> Result<Self, GrapeError> {
        let p = Self::new(
            &self.drift + extra,
            self.controls.clone(),
            self.initial.clone(),
            self.targets.clone(),
            self.kind,
        )?;
        Ok(p.with_exp_options(self.opts))
    }

    pub fn kind(&self) -> FidelityKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.drift.nrows()
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.initial.len()
    }

    pub fn drift(&self) -> &CMat {
        &self.drift
    }

    pub fn control_operators(&self) -> &[CMat] {
        &self.controls
    }

    pub fn initial_states(&self) -> &[CVec] {
        &self.initial
    }

    pub fn target_states(&self) -> &[CVec] {
        &self.targets
    }

    /// `commutes()[k][j]` is true when `[Hk, Hj]` vanishes.
    pub fn commutes(&self) -> &[Vec<bool>] {
        &self.commutes
    }

    /// True when propagation runs in real arithmetic.
    pub fn uses_real_arithmetic(&self) -> bool {
        matches!(self.engine, Engine::Real(..))
    }

    fn check_controls(&self, controls: &ControlSet) -> Result<(), GrapeError> {
        if controls.controls() != self.n_controls() {
            return Err(GrapeError::Dimension(format!(
                "{} control channels for {} operators",
                controls.controls(),
                self.n_controls()
            )));
        }
        Ok(())
    }

    fn raw(&self, controls: &ControlSet, order: Order) -> Result<(Raw, Option<&RealBasis>), GrapeError> {
        self.check_controls(controls)?;
        Ok(match &self.engine {
            Engine::Real(p, b) => (p.evaluate(controls, order, &self.opts)?, Some(b)),
            Engine::Complex(p) => (p.evaluate(controls, order, &self.opts)?, None),
        })
    }
}

fn prepare<T: Elem>(drift: &CMat, controls: &[CMat], initial: Vec<CVec>, targets: Vec<CVec>) -> Option<Prepared<T>> {
    let gen0 = T::from_complex_matrix(&(drift * -I))?;
    let mut gens = Vec::with_capacity(controls.len());
    for c in controls {
        gens.push(T::from_complex_matrix(&(c * -I))?);
    }
    let gen_sparse = gens.iter().map(Csr::from_dense).collect();
    Some(Prepared {
        gen0,
        gens,
        gen_sparse,
        initial,
        targets,
    })
}

fn build_engine(drift: &CMat, controls: &[CMat], initial: &[CVec], targets: &[CVec]) -> Engine {
    let n = drift.nrows();
    let d = (n as f64).sqrt().round() as usize;
    if d * d == n {
        let b = RealBasis::new(n);
        let w_drift = b.superop_to_working(drift);
        let w_controls: Vec<CMat> = controls.iter().map(|c| b.superop_to_working(c)).collect();
        let w_init = initial.iter().map(|v| b.to_working(v)).collect();
        let w_targ = targets.iter().map(|v| b.to_working(v)).collect();
        if let Some(p) = prepare::<f64>(&w_drift, &w_controls, w_init, w_targ) {
            return Engine::Real(p, b);
        }
    }
    Engine::Complex(
        prepare::<Complex64>(drift, controls, initial.to_vec(), targets.to_vec())
            .expect("complex representation always exists"),
    )
}

/// Value, gradient and optional Hessian of the fidelity at one control set.
#[derive(Clone, Debug)]
pub struct DerivativeBundle {
    pub kind: FidelityKind,
    /// Fidelity; complex only for `J0`.
    pub value: Complex64,
    /// Real gradient (for `J0`, the real part of the complex gradient).
    pub gradient: Vec<f64>,
    /// Real Hessian (for `J0`, the real part of the complex Hessian).
    pub hessian: Option<RMat>,
    /// Complex gradient, present for `J0`.
    pub complex_gradient: Option<Vec<Complex64>>,
    /// Complex Hessian, present for `J0` in Hessian mode.
    pub complex_hessian: Option<CMat>,
    /// Per-pair overlaps `<sigma|rho(T)>`.
    pub overlaps: Vec<Complex64>,
    /// `forward[pair][n]` is `rho[n]`, `n = 0..=N`.
    pub forward: Vec<Vec<CVec>>,
    /// `backward[pair][n]` is `chi[n]`, `n = 0..=N`, with `chi[N]` the target.
    pub backward: Vec<Vec<CVec>>,
    pub counters: Counters,
}

impl DerivativeBundle {
    pub fn fidelity(&self) -> f64 {
        self.value.re
    }
}

fn combine(kind: FidelityKind, raw: Raw, basis: Option<&RealBasis>, order: Order) -> DerivativeBundle {
    let q = raw.overlaps.len() as f64;
    let inv = Complex64::new(1.0 / q, 0.0);
    let mean_overlap: Complex64 = raw.overlaps.iter().sum::<Complex64>() * inv;
    let value = match kind {
        FidelityKind::J0 => mean_overlap,
        FidelityKind::J1 => Complex64::new(mean_overlap.re, 0.0),
        FidelityKind::J2 => Complex64::new(raw.overlaps.iter().map(|f| f.norm_sqr()).sum::<f64>() / q, 0.0),
    };
    let mut gradient = Vec::new();
    let mut complex_gradient = None;
    let mut hessian = None;
    let mut complex_hessian = None;
    if order != Order::Value {
        let len = raw.gradients[0].len();
        match kind {
            FidelityKind::J0 | FidelityKind::J1 => {
                let mut g = vec![Complex64::new(0.0, 0.0); len];
                for gq in &raw.gradients {
                    for (a, b) in g.iter_mut().zip(gq) {
                        *a += b;
                    }
                }
                g.iter_mut().for_each(|z| *z *= inv);
                gradient = g.iter().map(|z| z.re).collect();
                if kind == FidelityKind::J0 {
                    complex_gradient = Some(g);
                }
            }
            FidelityKind::J2 => {
                gradient = vec![0.0; len];
                for (f, gq) in raw.overlaps.iter().zip(&raw.gradients) {
                    for (a, b) in gradient.iter_mut().zip(gq) {
                        *a += 2.0 * (f.conj() * b).re / q;
                    }
                }
            }
        }
        if order == Order::Hessian {
            match kind {
                FidelityKind::J0 | FidelityKind::J1 => {
                    let mut h = CMat::zeros(len, len);
                    for hq in &raw.hessians {
                        h += hq;
                    }
                    h *= inv;
                    hessian = Some(h.map(|z| z.re));
                    if kind == FidelityKind::J0 {
                        complex_hessian = Some(h);
                    }
                }
                FidelityKind::J2 => {
                    let mut h = RMat::zeros(len, len);
                    for ((f, gq), hq) in raw.overlaps.iter().zip(&raw.gradients).zip(&raw.hessians) {
                        let fc = f.conj();
                        for j in 0..len {
                            for i in 0..len {
                                h[(i, j)] += 2.0 * ((fc * hq[(i, j)]).re + (gq[i] * gq[j].conj()).re) / q;
                            }
                        }
                    }
                    hessian = Some(h);
                }
            }
        }
    }
    let convert = |sets: Vec<Vec<CVec>>| -> Vec<Vec<CVec>> {
        match basis {
            Some(b) => sets
                .into_iter()
                .map(|s| s.iter().map(|v| b.to_original(v)).collect())
                .collect(),
            None => sets,
        }
    };
    DerivativeBundle {
        kind,
        value,
        gradient,
        hessian,
        complex_gradient,
        complex_hessian,
        overlaps: raw.overlaps,
        forward: convert(raw.forward),
        backward: convert(raw.backward),
        counters: raw.counters,
    }
}

/// Evaluates the fidelity to the requested derivative order.
pub fn evaluate(problem: &ControlProblem, controls: &ControlSet, order: Order) -> Result<DerivativeBundle, GrapeError> {
    let (raw, basis) = problem.raw(controls, order)?;
    Ok(combine(problem.kind, raw, basis, order))
}

/// Fidelity value (real part for `J0`).
pub fn fidelity(problem: &ControlProblem, controls: &ControlSet) -> Result<f64, GrapeError> {
    Ok(evaluate(problem, controls, Order::Value)?.fidelity())
}

/// Per-pair overlaps `<sigma|rho(T)>`.
pub fn overlaps(problem: &ControlProblem, controls: &ControlSet) -> Result<Vec<Complex64>, GrapeError> {
    let (raw, _) = problem.raw(controls, Order::Value)?;
    Ok(raw.overlaps)
}

pub fn gradient(problem: &ControlProblem, controls: &ControlSet) -> Result<DerivativeBundle, GrapeError> {
    evaluate(problem, controls, Order::Gradient)
}

pub fn hessian(problem: &ControlProblem, controls: &ControlSet) -> Result<DerivativeBundle, GrapeError> {
    evaluate(problem, controls, Order::Hessian)
}

/// Propagator of slice `n` (0-based) in the original Liouville basis.
pub fn slice_propagator(problem: &ControlProblem, controls: &ControlSet, n: usize) -> Result<CMat, GrapeError> {
    problem.check_controls(controls)?;
    if n >= controls.slices() {
        return Err(GrapeError::SliceOutOfRange {
            index: n,
            slices: controls.slices(),
        });
    }
    Ok(match &problem.engine {
        Engine::Real(p, b) => {
            let m = p.slice_propagator(controls, n, &problem.opts)?;
            b.superop_to_original(&m.map(|x| Complex64::new(x, 0.0)))
        }
        Engine::Complex(p) => p.slice_propagator(controls, n, &problem.opts)?,
    })
}

/// Slice generator `-i dt (G0 + power * sum_k c_kn Hk)` in the original basis.
pub fn slice_generator(problem: &ControlProblem, controls: &ControlSet, n: usize) -> Result<CMat, GrapeError> {
    problem.check_controls(controls)?;
    if n >= controls.slices() {
        return Err(GrapeError::SliceOutOfRange {
            index: n,
            slices: controls.slices(),
        });
    }
    let mut g = problem.drift.clone();
    for (k, h) in problem.controls.iter().enumerate() {
        g += h * Complex64::new(controls.power * controls.get(k, n), 0.0);
    }
    Ok(g * (-I * controls.dt))
}

/// Forward and backward trajectories for every state pair.
#[derive(Clone, Debug)]
pub struct Trajectories {
    /// `forward[pair][n] = rho[n]`
    pub forward: Vec<Vec<CVec>>,
    /// `backward[pair][n] = chi[n]`, `chi[N]` the target
    pub backward: Vec<Vec<CVec>>,
}

/// Trajectories from exponential actions, without forming propagators.
pub fn trajectories(problem: &ControlProblem, controls: &ControlSet) -> Result<Trajectories, GrapeError> {
    problem.check_controls(controls)?;
    let ns = controls.slices();
    let gens: Vec<CMat> = (0..ns)
        .map(|n| slice_generator(problem, controls, n))
        .collect::<Result<_, _>>()?;
    let mut forward = Vec::new();
    let mut backward = Vec::new();
    for q in 0..problem.n_pairs() {
        let mut rho = vec![problem.initial[q].clone()];
        for g in &gens {
            let next = expm_action(g, rho.last().unwrap(), &problem.opts)?;
            rho.push(next);
        }
        let mut chi = vec![CVec::zeros(0); ns + 1];
        chi[ns] = problem.targets[q].clone();
        for n in (0..ns).rev() {
            chi[n] = expm_action(&gens[n].adjoint(), &chi[n + 1], &problem.opts)?;
        }
        forward.push(rho);
        backward.push(chi);
    }
    Ok(Trajectories { forward, backward })
}

/// Weighted ensemble average of value and derivatives. Weights are
/// normalized to sum to one; members are summed in the given order.
pub fn ensemble_evaluate(
    members: &[(f64, ControlProblem)],
    controls: &ControlSet,
    order: Order,
) -> Result<DerivativeBundle, GrapeError> {
    if members.is_empty() {
        return Err(GrapeError::EmptyEnsemble);
    }
    for (w, _) in members {
        if !(*w > 0.0 && w.is_finite()) {
            return Err(GrapeError::InvalidWeight(*w));
        }
    }
    let total: f64 = members.iter().map(|(w, _)| w).sum();
    let mut acc: Option<DerivativeBundle> = None;
    for (w, p) in members {
        let b = evaluate(p, controls, order)?;
        let w = w / total;
        acc = Some(match acc {
            None => scale_bundle(b, w),
            Some(mut a) => {
                accumulate(&mut a, &b, w);
                a
            }
        });
    }
    Ok(acc.unwrap())
}

fn scale_bundle(mut b: DerivativeBundle, w: f64) -> DerivativeBundle {
    let cw = Complex64::new(w, 0.0);
    b.value *= cw;
    b.gradient.iter_mut().for_each(|x| *x *= w);
    if let Some(h) = &mut b.hessian {
        *h *= w;
    }
    if let Some(g) = &mut b.complex_gradient {
        g.iter_mut().for_each(|x| *x *= cw);
    }
    if let Some(h) = &mut b.complex_hessian {
        *h *= cw;
    }
    b
}

fn accumulate(a: &mut DerivativeBundle, b: &DerivativeBundle, w: f64) {
    let cw = Complex64::new(w, 0.0);
    a.value += b.value * cw;
    for (x, y) in a.gradient.iter_mut().zip(&b.gradient) {
        *x += w * y;
    }
    if let (Some(h), Some(hb)) = (&mut a.hessian, &b.hessian) {
        *h += hb * w;
    }
    if let (Some(g), Some(gb)) = (&mut a.complex_gradient, &b.complex_gradient) {
        for (x, y) in g.iter_mut().zip(gb) {
            *x += cw * y;
        }
    }
    if let (Some(h), Some(hb)) = (&mut a.complex_hessian, &b.complex_hessian) {
        *h += hb * cw;
    }
    a.counters += b.counters;
}

#[cfg(test)]
mod tests;
