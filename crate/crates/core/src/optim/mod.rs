//! Fidelity maximization by gradient ascent, quasi-Newton and regularized
//! Newton methods with Armijo or strong Wolfe line searches.
//!
//! Everything is stated for maximization: search directions satisfy
//! `<g, d> > 0` and regularizers make the Hessian negative definite.

pub mod linesearch;
pub mod objective;
pub mod quasi_newton;
pub mod regularize;

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grape::{ControlSet, Order};
use linesearch::{backtracking, bracket_section, LineSearchOutcome, Trial, WolfeParams};
pub use objective::{ControlObjective, Evaluation, FnObjective, Objective};
use quasi_newton::Lbfgs;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("direction is not ascent: <g, d> = {0:e}")]
    NotAscent(f64),
    #[error("line search failed: {0}")]
    LineSearch(String),
    #[error("regularization failed: {0}")]
    Regularization(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gradient,
    Sr1,
    /// Broyden family with `broyden_phi`.
    Broyden,
    /// Broyden family with `phi = 1`.
    Bfgs,
    /// Broyden family with `phi = 0`.
    Dfp,
    Lbfgs,
    Newton,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    Cholesky,
    Trm,
    Rfo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    /// Unit steps; falls back to backtracking if the objective would decrease.
    None,
    Backtracking,
    BracketSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub method: Method,
    pub broyden_phi: f64,
    pub lbfgs_memory: usize,
    pub regularizer: Regularizer,
    pub delta: f64,
    pub zeta_max: f64,
    pub phi_cond: f64,
    pub line_search: LineSearch,
    pub beta: f64,
    pub c1: f64,
    pub c2: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub max_ls_evals: usize,
    pub grad_inf_tol: f64,
    pub fidelity_delta_tol: f64,
    pub max_iterations: usize,
    /// Stop once the fidelity reaches this value.
    pub fidelity_target: Option<f64>,
    /// Known upper bound of the objective, used to stop line searches early.
    pub upper_bound: Option<f64>,
    /// Record wall-clock time in the trace; zero otherwise.
    #[serde(skip)]
    pub wall_time: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: Method::Bfgs,
            broyden_phi: 1.0,
            lbfgs_memory: 20,
            regularizer: Regularizer::Rfo,
            delta: 1.0,
            zeta_max: 1e4,
            phi_cond: 0.9,
            line_search: LineSearch::BracketSection,
            beta: 0.5,
            c1: 1e-4,
            c2: 0.9,
            tau1: 3.0,
            tau2: 0.1,
            tau3: 0.5,
            max_ls_evals: 30,
            grad_inf_tol: 1e-10,
            fidelity_delta_tol: 0.0,
            max_iterations: 100,
            fidelity_target: None,
            upper_bound: None,
            wall_time: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::Config(m.into()));
        if !(self.c1 > 0.0 && self.c1 < self.c2 && self.c2 < 1.0) {
            return bad("need 0 < c1 < c2 < 1");
        }
        if !(self.tau1 > 0.0) {
            return bad("need tau1 > 0");
        }
        if !(self.tau2 > 0.0 && self.tau2 < self.tau3 && self.tau3 <= 0.5) {
            return bad("need 0 < tau2 < tau3 <= 1/2");
        }
        if !(self.zeta_max > 1.0) {
            return bad("need zeta_max > 1");
        }
        if !(self.phi_cond > 0.0 && self.phi_cond < 1.0) {
            return bad("need 0 < phi_cond < 1");
        }
        if !(self.delta > 0.0) {
            return bad("need delta > 0");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("need 0 < beta < 1");
        }
        if !(0.0..=1.0).contains(&self.broyden_phi) {
            return bad("need 0 <= broyden_phi <= 1");
        }
        if self.lbfgs_memory == 0 {
            return bad("need lbfgs_memory >= 1");
        }
        if self.max_ls_evals == 0 {
            return bad("need max_ls_evals >= 1");
        }
        if !(self.grad_inf_tol >= 0.0 && self.fidelity_delta_tol >= 0.0) {
            return bad("tolerances must be nonnegative");
        }
        Ok(())
    }

    fn wolfe(&self) -> WolfeParams {
        WolfeParams {
            c1: self.c1,
            c2: self.c2,
            tau1: self.tau1,
            tau2: self.tau2,
            tau3: self.tau3,
            max_evals: self.max_ls_evals,
        }
    }
}

/// One row of the optimization trace; row 0 is the starting point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub fidelity: f64,
    pub penalty: f64,
    pub objective: f64,
    pub grad_inf_norm: f64,
    pub step_length: f64,
    pub ls_evals: usize,
    pub reg_iters: usize,
    pub cond_number: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    FidelityDelta,
    FidelityTarget,
    MaxIterations,
    Failed,
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    /// Best accepted iterate.
    pub x: Vec<f64>,
    pub evaluation: Evaluation,
    pub trace: Vec<TraceRow>,
    pub termination: Termination,
    /// Set when the run stopped on a line-search, regularization or
    /// evaluation failure.
    pub failure: Option<OptimError>,
    /// Rejected quasi-Newton updates.
    pub skipped_updates: usize,
}

impl OptimResult {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

fn inf_norm(g: &DVector<f64>) -> f64 {
    g.amax()
}

/// Curvature model of the quasi-Newton methods.
enum Model {
    None,
    /// Approximation of `-H`.
    Direct(DMatrix<f64>, bool),
    /// Approximation of `(-H)^-1`.
    Inverse(DMatrix<f64>, bool),
    Limited(Lbfgs),
}

impl Model {
    /// True while the model is still the unscaled identity.
    fn fresh(&self) -> bool {
        match self {
            Model::None => false,
            Model::Direct(_, scaled) | Model::Inverse(_, scaled) => !scaled,
            Model::Limited(l) => l.is_empty(),
        }
    }
}

struct Step {
    direction: DVector<f64>,
    reg_iters: usize,
    cond: Option<f64>,
}

fn condition(m: &DMatrix<f64>) -> f64 {
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn newton_step(cfg: &OptimizerConfig, g: &DVector<f64>, h: &DMatrix<f64>) -> Result<Step, OptimError> {
    let solve = |hr: &DMatrix<f64>| {
        (-hr)
            .cholesky()
            .map(|c| c.solve(g))
            .ok_or_else(|| OptimError::Regularization("regularized curvature is not positive definite".into()))
    };
    match cfg.regularizer {
        Regularizer::Cholesky => {
            let r = regularize::cholesky_regularize(h)?;
            Ok(Step {
                direction: solve(&r.hessian)?,
                reg_iters: r.iterations,
                cond: Some(condition(&-&r.hessian)),
            })
        }
        Regularizer::Trm => {
            let r = regularize::trm_regularize(h, cfg.delta)?;
            Ok(Step {
                direction: solve(&r.hessian)?,
                reg_iters: r.iterations,
                cond: Some(condition(&-&r.hessian)),
            })
        }
        Regularizer::Rfo => {
            let r = regularize::rfo_regularize(h, g, cfg.zeta_max, cfg.phi_cond)?;
            Ok(Step {
                direction: r.direction,
                reg_iters: r.iterations,
                cond: Some(r.cond),
            })
        }
    }
}

fn model_step(model: &Model, g: &DVector<f64>) -> Result<Step, OptimError> {
    let direction = match model {
        Model::None => g.clone(),
        Model::Inverse(h, _) => h * g,
        Model::Limited(l) => l.direction(g),
        Model::Direct(b, _) => {
            let sym = (b + b.transpose()) * 0.5;
            match sym.clone().cholesky() {
                Some(c) => c.solve(g),
                None => {
                    let r = regularize::cholesky_regularize(&-sym)?;
                    return Ok(Step {
                        direction: (-r.hessian).cholesky().map(|c| c.solve(g)).unwrap_or_else(|| g.clone()),
                        reg_iters: r.iterations,
                        cond: None,
                    });
                }
            }
        }
    };
    Ok(Step {
        direction,
        reg_iters: 0,
        cond: None,
    })
}

fn update_model(model: &mut Model, cfg: &OptimizerConfig, s: &DVector<f64>, y: &DVector<f64>) -> bool {
    let phi = match cfg.method {
        Method::Bfgs => 1.0,
        Method::Dfp => 0.0,
        _ => cfg.broyden_phi,
    };
    match model {
        Model::None => true,
        Model::Limited(l) => l.push(s.clone(), y.clone()),
        Model::Direct(b, scaled) => {
            if !*scaled {
                let sy = s.dot(y);
                if sy > 0.0 {
                    *b *= y.dot(y) / sy;
                    *scaled = true;
                }
            }
            match quasi_newton::sr1_update(b, s, y) {
                Some(nb) => {
                    *b = nb;
                    true
                }
                None => false,
            }
        }
        Model::Inverse(h, scaled) => {
            if !*scaled {
                let sy = s.dot(y);
                if sy > 0.0 {
                    *h *= sy / y.dot(y);
                    *scaled = true;
                }
            }
            match quasi_newton::inverse_broyden_update(h, s, y, phi) {
                Some(nh) => {
                    *h = nh;
                    true
                }
                None => false,
            }
        }
    }
}

/// Evaluations along the current search line, remembering the last one.
struct LineProbe<'a, O: Objective> {
    obj: &'a mut O,
    x: &'a DVector<f64>,
    d: &'a DVector<f64>,
    last: Option<(f64, DVector<f64>, Evaluation)>,
}

impl<O: Objective> LineProbe<'_, O> {
    fn eval(&mut self, alpha: f64, order: Order) -> Result<&Evaluation, OptimError> {
        let fresh = match &self.last {
            Some((a, _, e)) => *a != alpha || !e.has(order),
            None => true,
        };
        if fresh {
            let xn = self.x + self.d * alpha;
            let e = self.obj.evaluate(xn.as_slice(), order)?;
            self.last = Some((alpha, xn, e));
        }
        Ok(&self.last.as_ref().unwrap().2)
    }

    fn value(&mut self, alpha: f64) -> Result<f64, OptimError> {
        Ok(self.eval(alpha, Order::Value)?.objective())
    }

    fn trial(&mut self, alpha: f64, slope: bool) -> Result<Trial, OptimError> {
        let order = if slope { Order::Gradient } else { Order::Value };
        let d = self.d;
        let e = self.eval(alpha, order)?;
        Ok(Trial {
            value: e.objective(),
            slope: e.gradient.as_ref().map(|g| g.dot(d)),
        })
    }
}

/// Maximizes the objective from `x0`. Never panics on numerical failure: the
/// best iterate is returned with `failure` set.
pub fn optimize<O: Objective>(obj: &mut O, x0: Vec<f64>, cfg: &OptimizerConfig) -> Result<OptimResult, OptimError> {
    cfg.validate()?;
    if x0.len() != obj.dim() {
        return Err(OptimError::Config(format!(
            "starting point has {} variables, objective has {}",
            x0.len(),
            obj.dim()
        )));
    }
    let start = Instant::now();
    let wall = || {
        if cfg.wall_time {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    };
    let n = x0.len();
    let order = if cfg.method == Method::Newton {
        Order::Hessian
    } else {
        Order::Gradient
    };
    let mut x = DVector::from_vec(x0);
    let mut cur = obj.evaluate(x.as_slice(), order)?;
    let grad = |e: &Evaluation| {
        e.gradient
            .clone()
            .ok_or_else(|| OptimError::Evaluation("objective returned no gradient".into()))
    };
    let mut g = grad(&cur)?;
    let mut trace = vec![TraceRow {
        iteration: 0,
        fidelity: cur.fidelity,
        penalty: cur.penalty,
        objective: cur.objective(),
        grad_inf_norm: inf_norm(&g),
        step_length: 0.0,
        ls_evals: 0,
        reg_iters: 0,
        cond_number: None,
        wall_ms: wall(),
    }];
    let mut model = match cfg.method {
        Method::Gradient | Method::Newton => Model::None,
        Method::Sr1 => Model::Direct(DMatrix::identity(n, n), false),
        Method::Broyden | Method::Bfgs | Method::Dfp => Model::Inverse(DMatrix::identity(n, n), false),
        Method::Lbfgs => Model::Limited(Lbfgs::new(cfg.lbfgs_memory)),
    };
    let mut skipped = 0;
    let mut failure = None;
    let mut termination = Termination::MaxIterations;
    let mut prev_gain: Option<f64> = None;

    let reached = |e: &Evaluation| cfg.fidelity_target.is_some_and(|t| e.fidelity >= t);
    for it in 1..=cfg.max_iterations {
        if inf_norm(&g) < cfg.grad_inf_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        if reached(&cur) {
            termination = Termination::FidelityTarget;
            break;
        }
        let step = match cfg.method {
            Method::Newton => match &cur.hessian {
                Some(h) => newton_step(cfg, &g, h),
                None => Err(OptimError::Evaluation("objective returned no Hessian".into())),
            },
            _ => model_step(&model, &g),
        };
        let mut step = match step {
            Ok(s) => s,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let mut slope = g.dot(&step.direction);
        if !(slope > 0.0) && cfg.method != Method::Newton {
            // stale curvature model: restart from the gradient
            model = match model {
                Model::Direct(_, _) => Model::Direct(DMatrix::identity(n, n), false),
                Model::Inverse(_, _) => Model::Inverse(DMatrix::identity(n, n), false),
                Model::Limited(mut l) => {
                    l.clear();
                    Model::Limited(l)
                }
                Model::None => Model::None,
            };
            step.direction = g.clone();
            slope = g.dot(&g);
        }
        if !(slope > 0.0) {
            failure = Some(OptimError::NotAscent(slope));
            break;
        }
        let d = step.direction;
        let f0 = cur.objective();
        let alpha0 = match (cfg.method, prev_gain) {
            (Method::Gradient, None) => 1.0 / g.norm(),
            (Method::Gradient, Some(gain)) if gain > 0.0 => (2.0 * gain / slope).min(1e3 / g.norm()),
            (Method::Gradient, Some(_)) => 1.0 / g.norm(),
            _ if model.fresh() => 1.0 / g.norm(),
            _ => 1.0,
        };
        let mut probe = LineProbe {
            obj,
            x: &x,
            d: &d,
            last: None,
        };
        let ls: Result<LineSearchOutcome, OptimError> = match cfg.line_search {
            LineSearch::None => match probe.value(alpha0) {
                Ok(v) if v >= f0 => Ok(LineSearchOutcome {
                    alpha: alpha0,
                    value: v,
                    evals: 1,
                }),
                Ok(_) => backtracking(|a| probe.value(a), f0, slope, alpha0 * cfg.beta, cfg.beta, cfg.c1).map(|mut o| {
                    o.evals += 1;
                    o
                }),
                Err(e) => Err(e),
            },
            LineSearch::Backtracking => backtracking(|a| probe.value(a), f0, slope, alpha0, cfg.beta, cfg.c1),
            LineSearch::BracketSection => bracket_section(
                |a, s| probe.trial(a, s),
                f0,
                slope,
                alpha0,
                &cfg.wolfe(),
                cfg.upper_bound,
            ),
        };
        let ls = match ls {
            Ok(o) => o,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let next = match probe.last.take() {
            Some((a, xn, e)) if a == ls.alpha && e.has(order) => Ok((xn, e)),
            _ => {
                let xn = &x + &d * ls.alpha;
                obj.evaluate(xn.as_slice(), order).map(|e| (xn, e))
            }
        };
        let (xn, en) = match next {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        let gn = match grad(&en) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        if en.objective() < f0 {
            failure = Some(OptimError::LineSearch("accepted step decreased the objective".into()));
            break;
        }
        let s = &xn - &x;
        let y = -(&gn - &g);
        if !update_model(&mut model, cfg, &s, &y) {
            skipped += 1;
        }
        let gain = en.objective() - f0;
        prev_gain = Some(gain);
        x = xn;
        cur = en;
        g = gn;
        trace.push(TraceRow {
            iteration: it,
            fidelity: cur.fidelity,
            penalty: cur.penalty,
            objective: cur.objective(),
            grad_inf_norm: inf_norm(&g),
            step_length: ls.alpha,
            ls_evals: ls.evals,
            reg_iters: step.reg_iters,
            cond_number: step.cond,
            wall_ms: wall(),
        });
        if reached(&cur) {
            termination = Termination::FidelityTarget;
            break;
        }
        if gain.abs() < cfg.fidelity_delta_tol {
            termination = Termination::FidelityDelta;
            break;
        }
        if inf_norm(&g) < cfg.grad_inf_tol {
            termination = Termination::GradientTolerance;
            break;
        }
    }
    if failure.is_some() {
        termination = Termination::Failed;
    }
    Ok(OptimResult {
        x: x.as_slice().to_vec(),
        evaluation: cur,
        trace,
        termination,
        failure,
        skipped_updates: skipped,
    })
}

/// Runs [`optimize`] on a control objective starting from `initial` and
/// returns the optimized controls.
pub fn optimize_controls(
    obj: &mut ControlObjective,
    initial: &ControlSet,
    cfg: &OptimizerConfig,
) -> Result<(ControlSet, OptimResult), OptimError> {
    let x0 = obj.variables(initial)?;
    let r = optimize(obj, x0, cfg)?;
    let c = obj.controls(&r.x)?;
    Ok((c, r))
}
