//! Objective functions for the optimizer.

use nalgebra::{DMatrix, DVector};

use super::OptimError;
use crate::grape::{ensemble_evaluate, ControlProblem, ControlSet, DerivativeBundle, Order};
use crate::penalty::{self, PenaltySpec, PhaseOnly};

/// One objective evaluation. The maximized quantity is `fidelity - penalty`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub fidelity: f64,
    pub penalty: f64,
    pub gradient: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
}

impl Evaluation {
    pub fn objective(&self) -> f64 {
        self.fidelity - self.penalty
    }

    pub fn has(&self, order: Order) -> bool {
        match order {
            Order::Value => true,
            Order::Gradient => self.gradient.is_some(),
            Order::Hessian => self.gradient.is_some() && self.hessian.is_some(),
        }
    }
}

pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&mut self, x: &[f64], order: Order) -> Result<Evaluation, OptimError>;
}

/// Objective from a closure returning `(value, gradient, hessian)`.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: FnMut(&[f64], Order) -> (f64, Option<DVector<f64>>, Option<DMatrix<f64>>),
{
    pub fn new(dim: usize, f: F) -> Self {
        FnObjective { dim, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: FnMut(&[f64], Order) -> (f64, Option<DVector<f64>>, Option<DMatrix<f64>>),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&mut self, x: &[f64], order: Order) -> Result<Evaluation, OptimError> {
        let (v, g, h) = (self.f)(x, order);
        Ok(Evaluation {
            fidelity: v,
            penalty: 0.0,
            gradient: g,
            hessian: h,
        })
    }
}

/// Ensemble fidelity minus penalties over normalized amplitudes, optionally
/// through a phase-only parameterization.
#[derive(Clone, Debug)]
pub struct ControlObjective {
    members: Vec<(f64, ControlProblem)>,
    template: ControlSet,
    penalties: Vec<PenaltySpec>,
    phase: Option<PhaseOnly>,
}

impl ControlObjective {
    pub fn new(
        members: Vec<(f64, ControlProblem)>,
        template: ControlSet,
        penalties: Vec<PenaltySpec>,
    ) -> Result<Self, OptimError> {
        if members.is_empty() {
            return Err(OptimError::Config("ensemble is empty".into()));
        }
        for (_, p) in &members {
            if p.n_controls() != template.controls() {
                return Err(OptimError::Config(format!(
                    "problem has {} controls, controls have {}",
                    p.n_controls(),
                    template.controls()
                )));
            }
        }
        for p in &penalties {
            p.validate().map_err(|e| OptimError::Config(e.to_string()))?;
        }
        Ok(ControlObjective {
            members,
            template,
            penalties,
            phase: None,
        })
    }

    /// Switches to phase-only variables for the given `(x, y)` control pairs,
    /// with amplitudes frozen at those of `initial`.
    pub fn with_phase_only(mut self, initial: &ControlSet, pairs: Vec<(usize, usize)>) -> Result<Self, OptimError> {
        let (p, _) = PhaseOnly::from_controls(initial, pairs).map_err(|e| OptimError::Config(e.to_string()))?;
        self.template = initial.clone();
        self.phase = Some(p);
        Ok(self)
    }

    pub fn phase_only(&self) -> Option<&PhaseOnly> {
        self.phase.as_ref()
    }

    pub fn members(&self) -> &[(f64, ControlProblem)] {
        &self.members
    }

    pub fn penalties(&self) -> &[PenaltySpec] {
        &self.penalties
    }

    /// Optimization variables for a control set.
    pub fn variables(&self, controls: &ControlSet) -> Result<Vec<f64>, OptimError> {
        match &self.phase {
            None => Ok(controls.flat().to_vec()),
            Some(p) => {
                let (_, phases) = PhaseOnly::from_controls(controls, p.pairs().to_vec())
                    .map_err(|e| OptimError::Config(e.to_string()))?;
                Ok(phases)
            }
        }
    }

    pub fn controls(&self, x: &[f64]) -> Result<ControlSet, OptimError> {
        match &self.phase {
            None => self
                .template
                .with_flat(x.to_vec())
                .map_err(|e| OptimError::Evaluation(e.to_string())),
            Some(p) => p.controls(x).map_err(|e| OptimError::Evaluation(e.to_string())),
        }
    }

    /// Ensemble bundle at the given variables.
    pub fn bundle(&self, x: &[f64], order: Order) -> Result<DerivativeBundle, OptimError> {
        let c = self.controls(x)?;
        ensemble_evaluate(&self.members, &c, order).map_err(|e| OptimError::Evaluation(e.to_string()))
    }
}

impl Objective for ControlObjective {
    fn dim(&self) -> usize {
        match &self.phase {
            None => self.template.len(),
            Some(p) => p.dim(),
        }
    }

    fn evaluate(&mut self, x: &[f64], order: Order) -> Result<Evaluation, OptimError> {
        let c = self.controls(x)?;
        let b = ensemble_evaluate(&self.members, &c, order).map_err(|e| OptimError::Evaluation(e.to_string()))?;
        let pen = penalty::total(&self.penalties, &c).map_err(|e| OptimError::Evaluation(e.to_string()))?;
        let mut out = Evaluation {
            fidelity: b.fidelity(),
            penalty: pen.value,
            gradient: None,
            hessian: None,
        };
        if order == Order::Value {
            return Ok(out);
        }
        let g: Vec<f64> = b.gradient.iter().zip(&pen.gradient).map(|(a, p)| a - p).collect();
        let h = b.hessian.map(|h| h - &pen.hessian);
        match &self.phase {
            None => {
                out.gradient = Some(DVector::from_vec(g));
                out.hessian = h;
            }
            Some(p) => {
                let err = |e: penalty::PenaltyError| OptimError::Evaluation(e.to_string());
                out.gradient = Some(DVector::from_vec(p.gradient(x, &g).map_err(err)?));
                if let Some(h) = h {
                    out.hessian = Some(p.hessian(x, &g, &h).map_err(err)?);
                }
            }
        }
        Ok(out)
    }
}
