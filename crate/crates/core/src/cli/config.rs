//! Run configuration: TOML file structure, validation and problem assembly.
//!
//! Frequencies are given in Hz (or ppm with an isotope and field) and
//! converted to rad/s as `2 pi Hz` when the configuration is loaded.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Matrix3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::isotopes::{self, hz_to_rad};
use super::CliError;
use crate::grape::{ControlProblem, ControlSet, FidelityKind};
use crate::linalg::CMat;
use crate::optim::{ControlObjective, OptimizerConfig};
use crate::penalty::{PenaltySpec, PhaseOnly};
use crate::spinop::{
    commutation_superoperator, drift_liouvillian, Coupling, Quadrupolar, Relaxation, SpinSystem, StateSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSection,
    pub problem: ProblemSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub penalty: Vec<PenaltySpec>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// Isotope names such as `13C`; sets multiplicities and ppm conversion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isotopes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplicities: Option<Vec<usize>>,
    /// Magnetic field in tesla, needed for `offsets_ppm`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets_hz: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets_ppm: Option<Vec<f64>>,
    #[serde(default)]
    pub couplings: Vec<CouplingSection>,
    #[serde(default)]
    pub quadrupolar: Vec<QuadrupolarSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relaxation: Option<RelaxationSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    pub i: usize,
    pub j: usize,
    pub hz: f64,
    /// Keep only the `Lz Lz` term.
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadrupolarSection {
    pub spin: usize,
    pub tensor_hz: [[f64; 3]; 3],
}

/// Rates in s^-1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxationSection {
    pub r1: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub initial: Vec<String>,
    pub target: Vec<String>,
    #[serde(default = "default_fidelity")]
    pub fidelity: FidelityKind,
    /// Number of time slices.
    pub slices: usize,
    /// Total duration in seconds.
    pub duration: f64,
    /// Nominal control power in Hz.
    pub power_hz: f64,
    /// Control operators such as `Lx(0)` or `Ly(0,1)`.
    pub controls: Vec<String>,
    /// Optimize phases of consecutive `(Lx, Ly)` pairs at fixed amplitude.
    #[serde(default)]
    pub phase_only: bool,
    /// Scale of the random initial amplitudes (phase-only: the fixed amplitude).
    #[serde(default = "one")]
    pub initial_scale: f64,
}

fn default_fidelity() -> FidelityKind {
    FidelityKind::J1
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    #[serde(default)]
    pub power_factors: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_weights: Option<Vec<f64>>,
    /// Resonance offsets in Hz added to every spin.
    #[serde(default)]
    pub offsets_hz: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub convergence: String,
    pub waveform: String,
    pub trajectory: String,
    pub summary: String,
    pub bundle: String,
    /// Record wall-clock time in the convergence file.
    pub wall_time: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".into(),
            convergence: "convergence.csv".into(),
            waveform: "waveform.csv".into(),
            trajectory: "trajectory.csv".into(),
            summary: "summary.txt".into(),
            bundle: "bundle.json".into(),
            wall_time: false,
        }
    }
}

/// One ensemble member.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Member {
    pub power_factor: f64,
    pub offset_hz: f64,
    pub weight: f64,
}

/// Validated configuration with frequencies in rad/s.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub file: ConfigFile,
    pub system: SpinSystem,
    /// Seconds per slice.
    pub dt: f64,
    /// Nominal power in rad/s.
    pub power: f64,
    pub controls: Vec<StateSpec>,
    pub initial: Vec<StateSpec>,
    pub targets: Vec<StateSpec>,
    pub members: Vec<Member>,
    /// `(x, y)` control pairs for the polar waveform columns.
    pub pairs: Vec<(usize, usize)>,
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn check_weights(key: &str, w: &Option<Vec<f64>>, n: usize) -> Result<Vec<f64>, CliError> {
    match w {
        None => Ok(vec![1.0; n]),
        Some(w) if w.len() != n => Err(invalid(key, format!("{} weights for {n} entries", w.len()))),
        Some(w) => {
            if let Some(x) = w.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                return Err(invalid(key, format!("weight {x} must be positive")));
            }
            Ok(w.clone())
        }
    }
}

fn parse_states(key: &str, specs: &[String], system: &SpinSystem) -> Result<Vec<StateSpec>, CliError> {
    specs
        .iter()
        .map(|s| {
            let st: StateSpec = s.parse().map_err(|e| invalid(key, e))?;
            st.build(system).map_err(|e| invalid(key, e))?;
            Ok(st)
        })
        .collect()
}

fn build_system(s: &SystemSection) -> Result<SpinSystem, CliError> {
    let isotopes = match &s.isotopes {
        Some(names) => Some(
            names
                .iter()
                .map(|n| isotopes::lookup(n).ok_or_else(|| invalid("system.isotopes", format!("unknown isotope {n}"))))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let mults = match (&isotopes, &s.multiplicities) {
        (Some(iso), None) => iso.iter().map(|i| i.multiplicity).collect(),
        (None, Some(m)) => m.clone(),
        (Some(iso), Some(m)) => {
            if iso.iter().map(|i| i.multiplicity).ne(m.iter().copied()) {
                return Err(invalid("system.multiplicities", "disagree with system.isotopes"));
            }
            m.clone()
        }
        (None, None) => return Err(invalid("system", "needs isotopes or multiplicities")),
    };
    let n = mults.len();
    let mut sys = SpinSystem::new(mults).map_err(|e| invalid("system.multiplicities", e))?;
    let offsets_hz = match (&s.offsets_hz, &s.offsets_ppm) {
        (Some(_), Some(_)) => return Err(invalid("system.offsets_ppm", "give offsets_hz or offsets_ppm, not both")),
        (Some(hz), None) => hz.clone(),
        (None, Some(ppm)) => {
            let iso = isotopes
                .as_ref()
                .ok_or_else(|| invalid("system.offsets_ppm", "needs system.isotopes"))?;
            let field = s.field_t.ok_or_else(|| invalid("system.offsets_ppm", "needs system.field_t"))?;
            if !(field > 0.0 && field.is_finite()) {
                return Err(invalid("system.field_t", "must be positive"));
            }
            if ppm.len() != n {
                return Err(invalid("system.offsets_ppm", format!("{} values for {n} spins", ppm.len())));
            }
            ppm.iter().zip(iso).map(|(p, i)| i.ppm_to_hz(*p, field)).collect()
        }
        (None, None) => vec![0.0; n],
    };
    if offsets_hz.len() != n {
        return Err(invalid("system.offsets_hz", format!("{} values for {n} spins", offsets_hz.len())));
    }
    sys.offsets = offsets_hz.iter().map(|&h| hz_to_rad(h)).collect();
    sys.couplings = s
        .couplings
        .iter()
        .map(|c| Coupling {
            i: c.i,
            j: c.j,
            strength: hz_to_rad(c.hz),
            truncated: c.truncated,
        })
        .collect();
    sys.quadrupolar = s
        .quadrupolar
        .iter()
        .map(|q| Quadrupolar {
            spin: q.spin,
            tensor: Matrix3::from_fn(|a, b| hz_to_rad(q.tensor_hz[a][b])),
        })
        .collect();
    if let Some(r) = &s.relaxation {
        sys.relaxation = Some(Relaxation { r1: r.r1, r2: r.r2 });
    }
    sys.validate().map_err(|e| invalid("system", e))?;
    Ok(sys)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn from_file(mut file: ConfigFile) -> Result<Self, CliError> {
        let system = build_system(&file.system)?;
        let p = &file.problem;
        if p.slices == 0 {
            return Err(invalid("problem.slices", "must be at least 1"));
        }
        if !(p.duration > 0.0 && p.duration.is_finite()) {
            return Err(invalid("problem.duration", "must be positive"));
        }
        if !(p.power_hz > 0.0 && p.power_hz.is_finite()) {
            return Err(invalid("problem.power_hz", "must be positive"));
        }
        if !(p.initial_scale > 0.0 && p.initial_scale.is_finite()) {
            return Err(invalid("problem.initial_scale", "must be positive"));
        }
        if p.initial.is_empty() || p.initial.len() != p.target.len() {
            return Err(invalid("problem.target", "needs one target per initial state"));
        }
        let initial = parse_states("problem.initial", &p.initial, &system)?;
        let targets = parse_states("problem.target", &p.target, &system)?;
        if p.controls.is_empty() {
            return Err(invalid("problem.controls", "needs at least one control"));
        }
        let controls = parse_states("problem.controls", &p.controls, &system)?;
        if let Some(c) = controls
            .iter()
            .find(|c| !matches!(c, StateSpec::Lx(_) | StateSpec::Ly(_) | StateSpec::Lz(_)))
        {
            return Err(invalid("problem.controls", format!("{c} is not a Cartesian spin operator")));
        }
        let mut pairs = Vec::new();
        for (k, w) in controls.windows(2).enumerate() {
            if let (StateSpec::Lx(a), StateSpec::Ly(b)) = (&w[0], &w[1]) {
                if a == b && pairs.last().is_none_or(|&(_, y)| y < k) {
                    pairs.push((k, k + 1));
                }
            }
        }
        if p.phase_only && pairs.len() * 2 != controls.len() {
            return Err(invalid("problem.phase_only", "controls must be consecutive Lx/Ly pairs on the same spins"));
        }

        let e = &file.ensemble;
        let factors = if e.power_factors.is_empty() { vec![1.0] } else { e.power_factors.clone() };
        if let Some(f) = factors.iter().find(|f| !(**f > 0.0 && f.is_finite())) {
            return Err(invalid("ensemble.power_factors", format!("factor {f} must be positive")));
        }
        let pw = check_weights("ensemble.power_weights", &e.power_weights, factors.len())?;
        let offsets = if e.offsets_hz.is_empty() { vec![0.0] } else { e.offsets_hz.clone() };
        if let Some(o) = offsets.iter().find(|o| !o.is_finite()) {
            return Err(invalid("ensemble.offsets_hz", format!("offset {o} is not finite")));
        }
        let ow = check_weights("ensemble.offset_weights", &e.offset_weights, offsets.len())?;
        let mut members = Vec::new();
        for (f, a) in factors.iter().zip(&pw) {
            for (o, b) in offsets.iter().zip(&ow) {
                members.push(Member {
                    power_factor: *f,
                    offset_hz: *o,
                    weight: a * b,
                });
            }
        }
        for s in &file.penalty {
            s.validate().map_err(|e| invalid("penalty", e))?;
        }
        file.optimizer.wall_time = file.output.wall_time;
        file.optimizer.validate().map_err(|e| invalid("optimizer", e))?;

        Ok(RunConfig {
            dt: p.duration / p.slices as f64,
            power: hz_to_rad(p.power_hz),
            system,
            controls,
            initial,
            targets,
            members,
            pairs,
            file,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.file).expect("configuration serializes")
    }

    pub fn slices(&self) -> usize {
        self.file.problem.slices
    }

    pub fn optimizer(&self) -> &OptimizerConfig {
        &self.file.optimizer
    }

    pub fn penalties(&self) -> &[PenaltySpec] {
        &self.file.penalty
    }

    pub fn phase_only(&self) -> bool {
        self.file.problem.phase_only
    }

    pub fn control_operators(&self) -> Vec<CMat> {
        self.controls
            .iter()
            .map(|c| {
                let op = c.operator(&self.system).expect("validated at load");
                commutation_superoperator(&op).expect("square operator")
            })
            .collect()
    }

    pub fn problem(&self) -> Result<ControlProblem, CliError> {
        let drift = drift_liouvillian(&self.system).map_err(|e| invalid("system", e))?;
        let init = self.initial.iter().map(|s| s.build(&self.system).expect("validated")).collect();
        let targ = self.targets.iter().map(|s| s.build(&self.system).expect("validated")).collect();
        ControlProblem::new(drift, self.control_operators(), init, targ, self.file.problem.fidelity)
            .map_err(|e| invalid("problem", e))
    }

    /// Ensemble members as weighted problems, in configuration order.
    pub fn ensemble(&self) -> Result<Vec<(f64, ControlProblem)>, CliError> {
        let base = self.problem()?;
        let mut lz = CMat::zeros(self.system.dim(), self.system.dim());
        for s in 0..self.system.len() {
            lz += self.system.op(s, crate::spinop::Component::Z).expect("valid spin");
        }
        let lz = commutation_superoperator(&lz).expect("square operator");
        self.members
            .iter()
            .map(|m| {
                let mut p = base.clone();
                if m.power_factor != 1.0 {
                    p = p.with_power_scale(m.power_factor).map_err(|e| invalid("ensemble", e))?;
                }
                if m.offset_hz != 0.0 {
                    let extra = &lz * Complex64::new(hz_to_rad(m.offset_hz), 0.0);
                    p = p.with_extra_drift(&extra).map_err(|e| invalid("ensemble", e))?;
                }
                Ok((m.weight, p))
            })
            .collect()
    }

    /// Seeded starting controls: uniform in `[-s, s]`, or uniform phases in
    /// `(-pi, pi]` at amplitude `s` in phase-only mode.
    pub fn initial_controls(&self, seed: u64) -> ControlSet {
        let p = &self.file.problem;
        let nk = self.controls.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = ControlSet::zeros(nk, p.slices, self.dt, self.power).expect("validated");
        let s = p.initial_scale;
        for n in 0..p.slices {
            if p.phase_only {
                for &(a, b) in &self.pairs {
                    let phi = PI - rng.gen::<f64>() * 2.0 * PI;
                    c.set(a, n, s * phi.cos());
                    c.set(b, n, s * phi.sin());
                }
            } else {
                for k in 0..nk {
                    c.set(k, n, rng.gen_range(-s..=s));
                }
            }
        }
        c
    }

    pub fn objective(&self, initial: &ControlSet) -> Result<ControlObjective, CliError> {
        let obj = ControlObjective::new(self.ensemble()?, initial.clone(), self.file.penalty.clone())
            .map_err(|e| invalid("problem", e))?;
        if self.phase_only() {
            obj.with_phase_only(initial, self.pairs.clone()).map_err(|e| invalid("problem.phase_only", e))
        } else {
            Ok(obj)
        }
    }

    /// Phase-only parameterization of the given controls, if enabled.
    pub fn phase_map(&self, controls: &ControlSet) -> Option<PhaseOnly> {
        if !self.phase_only() {
            return None;
        }
        PhaseOnly::from_controls(controls, self.pairs.clone()).ok().map(|(p, _)| p)
    }
}
