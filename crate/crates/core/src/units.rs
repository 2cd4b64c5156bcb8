//! Unit conversions and per-element tables.
//!
//! Internal units are Å, eV, eV/Å and atomic mass units. kcal/mol and meV
//! only appear at report boundaries.

use crate::error::{Error, Result};

/// meV per kcal/mol.
pub const KCALMOL_TO_MEV: f64 = 43.3641;
/// Boltzmann constant in eV/K.
pub const KB_EV_PER_K: f64 = 8.617_333_262e-5;
/// k_B T at 300 K in eV.
pub const KB_T_300K: f64 = KB_EV_PER_K * 300.0;
/// Wavenumber (cm⁻¹) of a mass-weighted eigenvalue of 1 eV/(Å²·amu).
pub const EV_A2_AMU_TO_CM1: f64 = 521.470_898;

pub fn ev_to_mev(x: f64) -> f64 {
    x * 1000.0
}

pub fn mev_to_ev(x: f64) -> f64 {
    x / 1000.0
}

pub fn kcalmol_to_mev(x: f64) -> f64 {
    x * KCALMOL_TO_MEV
}

pub fn mev_to_kcalmol(x: f64) -> f64 {
    x / KCALMOL_TO_MEV
}

struct ElementData {
    z: u8,
    symbol: &'static str,
    mass: f64,
    covalent_radius: f64,
}

// Covalent radii from Cordero et al. (sp3 carbon).
const ELEMENTS: &[ElementData] = &[
    ElementData { z: 1, symbol: "H", mass: 1.008, covalent_radius: 0.31 },
    ElementData { z: 6, symbol: "C", mass: 12.011, covalent_radius: 0.76 },
    ElementData { z: 7, symbol: "N", mass: 14.007, covalent_radius: 0.71 },
    ElementData { z: 8, symbol: "O", mass: 15.999, covalent_radius: 0.66 },
    ElementData { z: 9, symbol: "F", mass: 18.998, covalent_radius: 0.57 },
    ElementData { z: 16, symbol: "S", mass: 32.06, covalent_radius: 1.05 },
    ElementData { z: 17, symbol: "Cl", mass: 35.45, covalent_radius: 1.02 },
    ElementData { z: 35, symbol: "Br", mass: 79.904, covalent_radius: 1.20 },
    ElementData { z: 53, symbol: "I", mass: 126.904, covalent_radius: 1.39 },
];

fn lookup(z: u8) -> Result<&'static ElementData> {
    ELEMENTS
        .iter()
        .find(|e| e.z == z)
        .ok_or(Error::UnknownElement(z))
}

pub fn covalent_radius(z: u8) -> Result<f64> {
    lookup(z).map(|e| e.covalent_radius)
}

pub fn atomic_mass(z: u8) -> Result<f64> {
    lookup(z).map(|e| e.mass)
}

pub fn symbol(z: u8) -> Result<&'static str> {
    lookup(z).map(|e| e.symbol)
}

/// Symbol for display purposes; unknown elements print as `Z<n>`.
pub fn symbol_or_number(z: u8) -> String {
    symbol(z).map(str::to_owned).unwrap_or_else(|_| format!("Z{z}"))
}

pub fn atomic_number(symbol: &str) -> Result<u8> {
    ELEMENTS
        .iter()
        .find(|e| e.symbol.eq_ignore_ascii_case(symbol))
        .map(|e| e.z)
        .ok_or_else(|| Error::UnknownSymbol(symbol.to_owned()))
}

pub fn known_elements() -> impl Iterator<Item = u8> {
    ELEMENTS.iter().map(|e| e.z)
}

pub const HYDROGEN: u8 = 1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kcal_round_trip() {
        for x in [1e-3, 0.5, 1.0, 17.25, 1234.5] {
            let back = mev_to_kcalmol(kcalmol_to_mev(x));
            assert!(((back - x) / x).abs() < 1e-12);
        }
        assert_eq!(kcalmol_to_mev(1.0), 43.3641);
    }

    #[test]
    fn thermal_energy_at_room_temperature() {
        assert!((KB_T_300K - 0.025852).abs() < 1e-6);
    }

    #[test]
    fn symbols_round_trip() {
        for z in known_elements() {
            assert_eq!(atomic_number(symbol(z).unwrap()).unwrap(), z);
        }
        assert!(matches!(covalent_radius(26), Err(Error::UnknownElement(26))));
    }
}
