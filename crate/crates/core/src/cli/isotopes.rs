//! Magnetogyric ratios of the supported isotopes.
//!
//! Values in units of 1e7 rad s^-1 T^-1 from R. K. Harris et al., "NMR
//! nomenclature. Nuclear spin properties and conventions for chemical
//! shifts", Pure Appl. Chem. 73, 1795 (2001).

use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Isotope {
    pub name: &'static str,
    pub multiplicity: usize,
    /// rad s^-1 T^-1
    pub gamma: f64,
}

pub const ISOTOPES: [Isotope; 4] = [
    Isotope { name: "1H", multiplicity: 2, gamma: 26.752_212_8e7 },
    Isotope { name: "13C", multiplicity: 2, gamma: 6.728_284e7 },
    Isotope { name: "19F", multiplicity: 2, gamma: 25.181_48e7 },
    Isotope { name: "14N", multiplicity: 3, gamma: 1.933_779_2e7 },
];

pub fn lookup(name: &str) -> Option<Isotope> {
    ISOTOPES.iter().copied().find(|i| i.name == name)
}

impl Isotope {
    /// Larmor frequency magnitude in Hz at `field` tesla.
    pub fn larmor_hz(&self, field: f64) -> f64 {
        self.gamma * field / (2.0 * PI)
    }

    /// Chemical shift in ppm to an offset in Hz.
    pub fn ppm_to_hz(&self, ppm: f64, field: f64) -> f64 {
        ppm * 1e-6 * self.larmor_hz(field)
    }

    pub fn hz_to_ppm(&self, hz: f64, field: f64) -> f64 {
        hz / (1e-6 * self.larmor_hz(field))
    }
}

pub fn hz_to_rad(hz: f64) -> f64 {
    2.0 * PI * hz
}

pub fn rad_to_hz(w: f64) -> f64 {
    w / (2.0 * PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_conversions() {
        let c = lookup("13C").unwrap();
        assert_eq!(c.multiplicity, 2);
        assert_eq!(lookup("14N").unwrap().multiplicity, 3);
        assert!(lookup("15N").is_none());
        // 13C at 11.7434 T: gamma B / 2 pi by hand
        let nu = 6.728284e7 * 11.7434 / (2.0 * PI);
        assert!((c.larmor_hz(11.7434) - nu).abs() < 1e-6);
        assert!((c.ppm_to_hz(0.1, 11.7434) - 0.1e-6 * nu).abs() < 1e-12);
        for x in [-3.0, 0.01, 12.5, 1e4] {
            assert!((rad_to_hz(hz_to_rad(x)) - x).abs() <= 1e-12 * x.abs());
            assert!((c.hz_to_ppm(c.ppm_to_hz(x, 9.4), 9.4) - x).abs() <= 1e-12 * x.abs());
        }
        // proton Larmor frequency near 500 MHz at 11.7434 T
        assert!((lookup("1H").unwrap().larmor_hz(11.7434) / 1e6 - 500.0).abs() < 0.1);
    }
}
