//! Fixed physical parameters of the atom–cavity system and the cavity mode
//! geometry.
//!
//! Everything here is stored in SI units. The only place where V/cm, μm or
//! nm appear is the configuration boundary (see [`crate::config`]).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced Planck constant (J·s).
pub const HBAR: f64 = 1.054_571_817e-34;

/// Conversion factor from V/cm to V/m.
pub const V_PER_CM_TO_V_PER_M: f64 = 100.0;

/// Physical constants and rates of the atom–cavity system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// Atomic transition / cavity wavelength (m).
    pub wavelength: f64,
    /// Gaussian mode waist (m).
    pub waist: f64,
    /// Cavity decay rate (1/s). The mean photon number of an undriven
    /// cavity decays as `exp(-kappa t)`.
    pub kappa: f64,
    /// Transition dipole moment (C·m).
    pub dipole: f64,
    /// Vacuum field amplitude at the mode center (V/m).
    pub e_vac0: f64,
    /// Atomic free-space decay rate (1/s). Only used for the strong-coupling
    /// check and the background estimate.
    pub gamma: f64,
    /// Excited-state population of injected atoms.
    pub rho_ee0: f64,
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("wavelength", self.wavelength),
            ("waist", self.waist),
            ("kappa", self.kappa),
            ("dipole", self.dipole),
            ("e_vac0", self.e_vac0),
            ("gamma", self.gamma),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::invalid(name, format!("must be finite and > 0, got {value}")));
            }
        }
        if !(0.0..=1.0).contains(&self.rho_ee0) {
            return Err(Error::invalid(
                "rho_ee0",
                format!("must lie in [0, 1], got {}", self.rho_ee0),
            ));
        }
        Ok(())
    }

    /// Peak single-photon coupling `g0 = mu * E_vac0 / hbar` (rad/s).
    pub fn peak_coupling(&self) -> f64 {
        self.dipole * self.e_vac0 / HBAR
    }

    /// Standing-wave wavenumber `2 pi / lambda`.
    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Same parameters with a different peak vacuum field (V/m).
    pub fn with_e_vac0(&self, e_vac0: f64) -> Self {
        PhysicalParams { e_vac0, ..*self }
    }
}

/// Center of the nanohole array in the cavity cross-section. `y` is the
/// atomic beam axis and is not represented.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AperturePosition {
    pub x: f64,
    pub z: f64,
}

impl AperturePosition {
    pub fn new(x: f64, z: f64) -> Self {
        AperturePosition { x, z }
    }

    pub fn on_axis(z: f64) -> Self {
        AperturePosition { x: 0.0, z }
    }
}

/// Counting volume used to define the total atom number: the aperture spans
/// `x0`, `z0` and the top-hat length `y0 = sqrt(pi) * w0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualBox {
    pub x0: f64,
    pub y0: f64,
    pub z0: f64,
}

impl VirtualBox {
    pub fn new(x0: f64, z0: f64, params: &PhysicalParams) -> Self {
        VirtualBox {
            x0,
            y0: top_hat_length(params.waist),
            z0,
        }
    }

    pub fn volume(&self) -> f64 {
        self.x0 * self.y0 * self.z0
    }
}

/// Length of the top-hat profile with the same Rabi angle as a Gaussian of
/// waist `w0`.
pub fn top_hat_length(waist: f64) -> f64 {
    PI.sqrt() * waist
}

/// Normalized mode function `exp(-(x/w0)^2) cos(2 pi z / lambda)`.
pub fn mode_function(pos: AperturePosition, params: &PhysicalParams) -> f64 {
    let transverse = (-(pos.x / params.waist).powi(2)).exp();
    transverse * (params.wavenumber() * pos.z).cos()
}

/// Local vacuum Rabi coupling `g(x, z)` (rad/s). The sign of the mode
/// function is carried through.
pub fn coupling_at(pos: AperturePosition, params: &PhysicalParams) -> f64 {
    params.peak_coupling() * mode_function(pos, params)
}

/// Top-hat interaction time `sqrt(pi) w0 / v` (s).
pub fn interaction_time(velocity: f64, params: &PhysicalParams) -> Result<f64> {
    if !(velocity.is_finite() && velocity > 0.0) {
        return Err(Error::invalid(
            "velocity",
            format!("must be finite and > 0, got {velocity}"),
        ));
    }
    Ok(top_hat_length(params.waist) / velocity)
}

/// Mean atom number corrected for imperfect inversion,
/// `n_tot * (rho_ee - rho_gg)` with `rho_gg = 1 - rho_ee`.
pub fn effective_mean_atom_number(n_tot: f64, rho_ee0: f64) -> f64 {
    n_tot * (2.0 * rho_ee0 - 1.0)
}
