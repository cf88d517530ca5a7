//! Orthonormal Hermitian operator basis.
//!
//! In the basis `{E_aa, (E_ab + E_ba)/sqrt2, i(E_ab - E_ba)/sqrt2}` the
//! generator `-i L` of a Hermitian commutation superoperator is a real
//! matrix, which lets the propagation engine run in real arithmetic.

use num_complex::Complex64;

use crate::linalg::{CMat, CVec};

#[derive(Clone, Debug)]
pub(crate) struct RealBasis {
    /// Columns are the vectorized basis operators.
    u: CMat,
}

impl RealBasis {
    pub fn new(liouville_dim: usize) -> Self {
        let d = (liouville_dim as f64).sqrt().round() as usize;
        assert_eq!(d * d, liouville_dim);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mut u = CMat::zeros(liouville_dim, liouville_dim);
        for b in 0..d {
            for a in 0..d {
                let l = a + b * d;
                let t = b + a * d;
                if a == b {
                    u[(l, l)] = Complex64::new(1.0, 0.0);
                } else if a < b {
                    u[(l, l)] = Complex64::new(h, 0.0);
                    u[(t, l)] = Complex64::new(h, 0.0);
                } else {
                    // i (E_ba - E_ab) / sqrt2 with b < a
                    u[(t, l)] = Complex64::new(0.0, h);
                    u[(l, l)] = Complex64::new(0.0, -h);
                }
            }
        }
        RealBasis { u }
    }

    pub fn to_working(&self, v: &CVec) -> CVec {
        self.u.ad_mul(v)
    }

    pub fn to_original(&self, v: &CVec) -> CVec {
        &self.u * v
    }

    pub fn superop_to_working(&self, g: &CMat) -> CMat {
        self.u.adjoint() * g * &self.u
    }

    pub fn superop_to_original(&self, g: &CMat) -> CMat {
        &self.u * g * self.u.adjoint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spinop::{commutation_superoperator, vectorize, SpinSystem};

    #[test]
    fn basis_is_unitary() {
        let b = RealBasis::new(9);
        let p = b.u.adjoint() * &b.u;
        assert!((p - CMat::identity(9, 9)).norm() < 1e-14);
    }

    #[test]
    fn hermitian_operators_have_real_coordinates() {
        let sys = SpinSystem::new(vec![3]).unwrap();
        let ly = sys.op(0, crate::spinop::Component::Y).unwrap();
        let c = RealBasis::new(9).to_working(&vectorize(&ly));
        assert!(c.iter().all(|z| z.im.abs() < 1e-15));
    }

    #[test]
    fn commutation_generator_is_real() {
        let sys = SpinSystem::new(vec![2, 2]).unwrap();
        let h = sys.op(0, crate::spinop::Component::Y).unwrap()
            + sys.op(1, crate::spinop::Component::X).unwrap();
        let l = commutation_superoperator(&h).unwrap();
        let b = RealBasis::new(16);
        let g = b.superop_to_working(&l) * Complex64::new(0.0, -1.0);
        assert!(g.iter().all(|z| z.im.abs() < 1e-15));
        assert!((b.superop_to_original(&b.superop_to_working(&l)) - &l).norm() < 1e-14);
    }
}
