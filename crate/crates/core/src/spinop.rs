//! Spin operators, composite-system operators, drift Hamiltonians, states and
//! Liouville-space superoperators.
//!
//! Density matrices are vectorized column by column, so entry `(i, j)` of a
//! `d x d` operator sits at position `i + j * d`.

use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix3;
use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{cvec_norm, CMat, CVec, I};

/// Entries below this magnitude are removed from constructed operators.
pub const DROP_THRESHOLD: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpinError {
    #[error("invalid multiplicity {0} (must be at least 2)")]
    InvalidMultiplicity(usize),
    #[error("spin index {index} out of range for a system of {count} spins")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("spin index {0} listed more than once")]
    DuplicateIndex(usize),
    #[error("operator of dimension {found} placed on spin with multiplicity {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("quadrupolar coupling on spin {spin} with multiplicity {mult}")]
    QuadrupolarOnSpinHalf { spin: usize, mult: usize },
    #[error("quadrupolar tensor on spin {0} is not symmetric")]
    AsymmetricTensor(usize),
    #[error("coupling between spin {0} and itself")]
    SelfCoupling(usize),
    #[error("negative relaxation rate {0}")]
    NegativeRate(f64),
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("unknown state specification `{0}`")]
    UnknownState(String),
    #[error("state `{0}` has zero norm")]
    ZeroState(String),
}

/// Single-spin operators for a given multiplicity.
#[derive(Clone, Debug)]
pub struct SpinOperators {
    pub x: CMat,
    pub y: CMat,
    pub z: CMat,
    pub plus: CMat,
    pub minus: CMat,
    pub square: CMat,
}

pub fn spin_operators(mult: usize) -> Result<SpinOperators, SpinError> {
    if mult < 2 {
        return Err(SpinError::InvalidMultiplicity(mult));
    }
    let s = (mult as f64 - 1.0) / 2.0;
    let m = |a: usize| s - a as f64;
    let z = CMat::from_fn(mult, mult, |i, j| {
        if i == j {
            Complex64::new(m(i), 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let mut plus = CMat::zeros(mult, mult);
    for a in 1..mult {
        let ma = m(a);
        plus[(a - 1, a)] = Complex64::new((s * (s + 1.0) - ma * (ma + 1.0)).sqrt(), 0.0);
    }
    let minus = plus.adjoint();
    let x = (&plus + &minus) * Complex64::new(0.5, 0.0);
    let y = (&plus - &minus) / (I * 2.0);
    let square = &x * &x + &y * &y + &z * &z;
    Ok(SpinOperators {
        x,
        y,
        z,
        plus,
        minus,
        square,
    })
}

/// Cartesian or ladder component of a single-spin operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    X,
    Y,
    Z,
    Plus,
    Minus,
}

impl SpinOperators {
    pub fn get(&self, c: Component) -> &CMat {
        match c {
            Component::X => &self.x,
            Component::Y => &self.y,
            Component::Z => &self.z,
            Component::Plus => &self.plus,
            Component::Minus => &self.minus,
        }
    }
}

/// Isotropic scalar coupling `a (L_i . L_j)`, or `a Lz_i Lz_j` when truncated.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub i: usize,
    pub j: usize,
    /// rad/s
    pub strength: f64,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quadrupolar {
    pub spin: usize,
    /// rad/s
    pub tensor: Matrix3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Relaxation {
    /// Population decay rate in 1/s.
    pub r1: f64,
    /// Coherence decay rate in 1/s.
    pub r2: f64,
}

/// Declarative spin inventory from which all matrices are generated.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SpinSystem {
    pub multiplicities: Vec<usize>,
    /// Zeeman offsets in rad/s, one per spin.
    pub offsets: Vec<f64>,
    pub couplings: Vec<Coupling>,
    pub quadrupolar: Vec<Quadrupolar>,
    pub relaxation: Option<Relaxation>,
}

impl SpinSystem {
    /// Spins with the given multiplicities and no interactions.
    pub fn new(multiplicities: Vec<usize>) -> Result<Self, SpinError> {
        let n = multiplicities.len();
        let sys = SpinSystem {
            multiplicities,
            offsets: vec![0.0; n],
            ..Default::default()
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn len(&self) -> usize {
        self.multiplicities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multiplicities.is_empty()
    }

    /// Hilbert-space dimension.
    pub fn dim(&self) -> usize {
        self.multiplicities.iter().product()
    }

    pub fn liouville_dim(&self) -> usize {
        self.dim() * self.dim()
    }

    fn check_index(&self, index: usize) -> Result<(), SpinError> {
        if index >= self.len() {
            return Err(SpinError::IndexOutOfRange {
                index,
                count: self.len(),
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SpinError> {
        for &m in &self.multiplicities {
            if m < 2 {
                return Err(SpinError::InvalidMultiplicity(m));
            }
        }
        if self.offsets.len() > self.len() {
            return Err(SpinError::IndexOutOfRange {
                index: self.offsets.len() - 1,
                count: self.len(),
            });
        }
        for c in &self.couplings {
            self.check_index(c.i)?;
            self.check_index(c.j)?;
            if c.i == c.j {
                return Err(SpinError::SelfCoupling(c.i));
            }
        }
        for q in &self.quadrupolar {
            self.check_index(q.spin)?;
            let mult = self.multiplicities[q.spin];
            if mult < 3 {
                return Err(SpinError::QuadrupolarOnSpinHalf { spin: q.spin, mult });
            }
            let scale = q.tensor.abs().max().max(f64::MIN_POSITIVE);
            if (q.tensor - q.tensor.transpose()).abs().max() > 1e-12 * scale {
                return Err(SpinError::AsymmetricTensor(q.spin));
            }
        }
        if let Some(r) = self.relaxation {
            for rate in [r.r1, r.r2] {
                if rate < 0.0 || rate.is_nan() {
                    return Err(SpinError::NegativeRate(rate));
                }
            }
        }
        Ok(())
    }

    /// Single-spin operator `comp` on spin `spin`, embedded in the full space.
    pub fn op(&self, spin: usize, comp: Component) -> Result<CMat, SpinError> {
        self.check_index(spin)?;
        let ops = spin_operators(self.multiplicities[spin])?;
        composite_operator(self, &[(spin, ops.get(comp).clone())])
    }

    pub fn identity(&self) -> CMat {
        CMat::identity(self.dim(), self.dim())
    }
}

fn drop_small(mut a: CMat) -> CMat {
    crate::linalg::drop_small(&mut a, DROP_THRESHOLD);
    a
}

/// Kronecker chain with `placements` at their spin positions and identities
/// elsewhere. Spin 0 is the leftmost factor.
pub fn composite_operator(
    system: &SpinSystem,
    placements: &[(usize, CMat)],
) -> Result<CMat, SpinError> {
    for (p, (idx, op)) in placements.iter().enumerate() {
        system.check_index(*idx)?;
        if placements[..p].iter().any(|(j, _)| j == idx) {
            return Err(SpinError::DuplicateIndex(*idx));
        }
        if op.nrows() != op.ncols() {
            return Err(SpinError::NotSquare(op.nrows(), op.ncols()));
        }
        let mult = system.multiplicities[*idx];
        if op.nrows() != mult {
            return Err(SpinError::DimensionMismatch {
                expected: mult,
                found: op.nrows(),
            });
        }
    }
    let mut out = CMat::identity(1, 1);
    for (k, &mult) in system.multiplicities.iter().enumerate() {
        let factor = match placements.iter().find(|(i, _)| *i == k) {
            Some((_, op)) => op.clone(),
            None => CMat::identity(mult, mult),
        };
        out = out.kronecker(&factor);
    }
    Ok(drop_small(out))
}

/// Drift Hamiltonian from offsets, scalar couplings and quadrupolar terms.
pub fn drift_hamiltonian(system: &SpinSystem) -> Result<CMat, SpinError> {
    system.validate()?;
    let d = system.dim();
    let mut h = CMat::zeros(d, d);
    let c = |x: f64| Complex64::new(x, 0.0);
    for (k, &w) in system.offsets.iter().enumerate() {
        if w != 0.0 {
            h += system.op(k, Component::Z)? * c(w);
        }
    }
    for cp in &system.couplings {
        let oi = spin_operators(system.multiplicities[cp.i])?;
        let oj = spin_operators(system.multiplicities[cp.j])?;
        let comps: &[Component] = if cp.truncated {
            &[Component::Z]
        } else {
            &[Component::X, Component::Y, Component::Z]
        };
        for &comp in comps {
            let term = composite_operator(
                system,
                &[(cp.i, oi.get(comp).clone()), (cp.j, oj.get(comp).clone())],
            )?;
            h += term * c(cp.strength);
        }
    }
    for q in &system.quadrupolar {
        let ops = spin_operators(system.multiplicities[q.spin])?;
        let l = [&ops.x, &ops.y, &ops.z];
        let mult = system.multiplicities[q.spin];
        let mut local = CMat::zeros(mult, mult);
        for a in 0..3 {
            for b in 0..3 {
                let v = q.tensor[(a, b)];
                if v != 0.0 {
                    local += l[a] * l[b] * c(v);
                }
            }
        }
        h += composite_operator(system, &[(q.spin, local)])?;
    }
    Ok(drop_small(h))
}

/// `1 (x) H - H^T (x) 1`, so that `L vec(X) = vec(HX - XH)`.
pub fn commutation_superoperator(h: &CMat) -> Result<CMat, SpinError> {
    if h.nrows() != h.ncols() {
        return Err(SpinError::NotSquare(h.nrows(), h.ncols()));
    }
    let d = h.nrows();
    let id = CMat::identity(d, d);
    Ok(drop_small(id.kronecker(h) - h.transpose().kronecker(&id)))
}

/// Diagonal relaxation rates: `r1` on population positions, `r2` on coherences.
///
/// The returned matrix holds nonnegative rates `G`; the propagator generator
/// is `-i L - G`, so states decay.
pub fn relaxation_superoperator(system: &SpinSystem) -> Result<CMat, SpinError> {
    system.validate()?;
    let d = system.dim();
    let r = system.relaxation.unwrap_or_default();
    let mut g = CMat::zeros(d * d, d * d);
    for j in 0..d {
        for i in 0..d {
            let rate = if i == j { r.r1 } else { r.r2 };
            g[(i + j * d, i + j * d)] = Complex64::new(rate, 0.0);
        }
    }
    Ok(g)
}

/// Drift Liouvillian `L(H0) + iR` where `R = -G` holds the relaxation rates.
pub fn drift_liouvillian(system: &SpinSystem) -> Result<CMat, SpinError> {
    let l = commutation_superoperator(&drift_hamiltonian(system)?)?;
    let g = relaxation_superoperator(system)?;
    Ok(l - g * I)
}

/// Column-wise vectorization of an operator.
pub fn vectorize(op: &CMat) -> CVec {
    CVec::from_column_slice(op.as_slice())
}

pub fn unvectorize(v: &CVec) -> CMat {
    let d = (v.len() as f64).sqrt().round() as usize;
    CMat::from_column_slice(d, d, v.as_slice())
}

/// Named initial and target states.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StateSpec {
    Lx(Vec<usize>),
    Ly(Vec<usize>),
    Lz(Vec<usize>),
    T10(usize),
    T11(usize),
    T1m1(usize),
    T20(usize),
    T21(usize),
    T2m1(usize),
    T22(usize),
    T2m2(usize),
    Singlet(usize, usize),
}

impl StateSpec {
    /// Unnormalized operator.
    pub fn operator(&self, system: &SpinSystem) -> Result<CMat, SpinError> {
        let sum = |spins: &[usize], comp| -> Result<CMat, SpinError> {
            let mut acc = CMat::zeros(system.dim(), system.dim());
            for &s in spins {
                acc += system.op(s, comp)?;
            }
            Ok(acc)
        };
        let single = |spin: usize, f: &dyn Fn(&SpinOperators) -> CMat| -> Result<CMat, SpinError> {
            system.check_index(spin)?;
            let ops = spin_operators(system.multiplicities[spin])?;
            composite_operator(system, &[(spin, f(&ops))])
        };
        let c = |x: f64| Complex64::new(x, 0.0);
        let r2 = std::f64::consts::SQRT_2;
        match self {
            StateSpec::Lx(s) => sum(s, Component::X),
            StateSpec::Ly(s) => sum(s, Component::Y),
            StateSpec::Lz(s) => sum(s, Component::Z),
            StateSpec::T10(s) => single(*s, &|o| o.z.clone()),
            StateSpec::T11(s) => single(*s, &|o| &o.plus * c(-1.0 / r2)),
            StateSpec::T1m1(s) => single(*s, &|o| &o.minus * c(1.0 / r2)),
            StateSpec::T22(s) => single(*s, &|o| &o.plus * &o.plus * c(0.5)),
            StateSpec::T2m2(s) => single(*s, &|o| &o.minus * &o.minus * c(0.5)),
            StateSpec::T21(s) => single(*s, &|o| (&o.z * &o.plus + &o.plus * &o.z) * c(-0.5)),
            StateSpec::T2m1(s) => single(*s, &|o| (&o.z * &o.minus + &o.minus * &o.z) * c(0.5)),
            StateSpec::T20(s) => single(*s, &|o| {
                let lpm = &o.plus * &o.minus + &o.minus * &o.plus;
                (&o.z * &o.z - lpm * c(0.25)) * c((2.0f64 / 3.0).sqrt())
            }),
            StateSpec::Singlet(a, b) => {
                if a == b {
                    return Err(SpinError::DuplicateIndex(*a));
                }
                let mut p = system.identity() * c(0.25);
                for comp in [Component::X, Component::Y, Component::Z] {
                    p -= system.op(*a, comp)? * system.op(*b, comp)?;
                }
                Ok(drop_small(p))
            }
        }
    }

    /// Vectorized, normalized state.
    pub fn build(&self, system: &SpinSystem) -> Result<CVec, SpinError> {
        let v = vectorize(&self.operator(system)?);
        let n = cvec_norm(&v);
        if n == 0.0 {
            return Err(SpinError::ZeroState(self.to_string()));
        }
        Ok(v / Complex64::new(n, 0.0))
    }
}

impl fmt::Display for StateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        match self {
            StateSpec::Lx(s) => write!(f, "Lx({})", list(s)),
            StateSpec::Ly(s) => write!(f, "Ly({})", list(s)),
            StateSpec::Lz(s) => write!(f, "Lz({})", list(s)),
            StateSpec::T10(s) => write!(f, "T10({s})"),
            StateSpec::T11(s) => write!(f, "T11({s})"),
            StateSpec::T1m1(s) => write!(f, "T1m1({s})"),
            StateSpec::T20(s) => write!(f, "T20({s})"),
            StateSpec::T21(s) => write!(f, "T21({s})"),
            StateSpec::T2m1(s) => write!(f, "T2m1({s})"),
            StateSpec::T22(s) => write!(f, "T22({s})"),
            StateSpec::T2m2(s) => write!(f, "T2m2({s})"),
            StateSpec::Singlet(a, b) => write!(f, "singlet({a},{b})"),
        }
    }
}

impl FromStr for StateSpec {
    type Err = SpinError;

    /// Parses forms such as `Lz(0)`, `Lx(0,1)`, `T22(0)` or `singlet(0,1)`.
    fn from_str(s: &str) -> Result<Self, SpinError> {
        let unknown = || SpinError::UnknownState(s.to_string());
        let t = s.trim();
        let open = t.find('(').ok_or_else(unknown)?;
        if !t.ends_with(')') {
            return Err(unknown());
        }
        let name = t[..open].trim();
        let args: Vec<usize> = t[open + 1..t.len() - 1]
            .split(',')
            .map(|a| a.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| unknown())?;
        let one = || {
            if args.len() == 1 {
                Ok(args[0])
            } else {
                Err(unknown())
            }
        };
        Ok(match name {
            "Lx" => StateSpec::Lx(args.clone()),
            "Ly" => StateSpec::Ly(args.clone()),
            "Lz" => StateSpec::Lz(args.clone()),
            "T10" => StateSpec::T10(one()?),
            "T11" => StateSpec::T11(one()?),
            "T1m1" => StateSpec::T1m1(one()?),
            "T20" => StateSpec::T20(one()?),
            "T21" => StateSpec::T21(one()?),
            "T2m1" => StateSpec::T2m1(one()?),
            "T22" => StateSpec::T22(one()?),
            "T2m2" => StateSpec::T2m2(one()?),
            "singlet" if args.len() == 2 => StateSpec::Singlet(args[0], args[1]),
            _ => return Err(unknown()),
        })
    }
}
