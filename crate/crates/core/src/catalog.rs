//! Built-in master equations.
//!
//! Both qubit models use the standard Pauli basis with `σz|0⟩ = |0⟩`; the
//! ground state is `|1⟩`, so decay drives the Bloch vector towards `z = −1`.

use crate::algebra::{c, CMat};
use crate::error::Result;
use crate::model::MasterEquation;

/// Resonantly driven two-level atom: `H = (Ω/2)σx`, `c = i√γ|1⟩⟨0|`.
///
/// The phase of the jump operator does not change ℒ; it fixes the convention
/// in which the local-oscillator amplitude of the `u`-axis scheme is purely
/// imaginary.
pub fn resonance_fluorescence(gamma: f64, omega: f64) -> Result<MasterEquation> {
    let h = CMat::from_row_slice(
        2,
        2,
        &[c(0.0, 0.0), c(omega / 2.0, 0.0), c(omega / 2.0, 0.0), c(0.0, 0.0)],
    );
    let mut jump = CMat::zeros(2, 2);
    jump[(1, 0)] = c(0.0, gamma.sqrt());
    MasterEquation::new(h, vec![jump])
}

/// Thermal qubit with emission rate `γ₋` (`c₁ = √γ₋|1⟩⟨0|`) and absorption
/// rate `γ₊` (`c₂ = √γ₊|0⟩⟨1|`).
pub fn absorption_emission(gamma_minus: f64, gamma_plus: f64) -> Result<MasterEquation> {
    let mut down = CMat::zeros(2, 2);
    down[(1, 0)] = c(gamma_minus.sqrt(), 0.0);
    let mut up = CMat::zeros(2, 2);
    up[(0, 1)] = c(gamma_plus.sqrt(), 0.0);
    MasterEquation::new(CMat::zeros(2, 2), vec![down, up])
}
