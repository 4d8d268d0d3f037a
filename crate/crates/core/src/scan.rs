//! Synthetic aperture scans: positions to expected cavity output to
//! detector counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::ensemble::{averaged_steady_state, AveragedPump, PositionSpreadKernel, PumpBase};
use crate::error::{Error, Result};
use crate::kinetics::{photon_flux, steady_state_product, MAX_N_MAX};
use crate::physics::{mode_function, AperturePosition, PhysicalParams};

/// Population change per transit used for the spontaneous-emission
/// background.
pub const BACKGROUND_POPULATION_CHANGE: f64 = 0.028;
/// Fraction of the free-space emission collected by the cavity mode.
pub const BACKGROUND_SOLID_ANGLE: f64 = 1e-4;
/// Default number of scan points from antinode to node.
pub const DEFAULT_SCAN_POINTS: usize = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    None,
    #[default]
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanConfig {
    pub positions: Vec<AperturePosition>,
    /// Dwell time per point (s).
    pub dwell: f64,
    /// Detector counts per emitted photon.
    pub scale: f64,
    /// Dark-count rate (counts/s).
    pub dark_rate: f64,
    pub seed: u64,
    pub noise: NoiseModel,
    /// Add the spontaneous-emission background to the cavity flux.
    pub background: bool,
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dwell.is_finite() && self.dwell > 0.0) {
            return Err(Error::invalid("dwell", format!("must be > 0, got {}", self.dwell)));
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::invalid("scale", format!("must be >= 0, got {}", self.scale)));
        }
        if !(self.dark_rate.is_finite() && self.dark_rate >= 0.0) {
            return Err(Error::invalid("dark_rate", format!("must be >= 0, got {}", self.dark_rate)));
        }
        if self.positions.iter().any(|p| !(p.x.is_finite() && p.z.is_finite())) {
            return Err(Error::invalid("positions", "must be finite"));
        }
        Ok(())
    }
}

/// `n` evenly spaced points on `x = 0` from the antinode `z = 0` to the
/// node `z = λ/4`, both included.
pub fn node_to_antinode_positions(params: &PhysicalParams, n: usize) -> Vec<AperturePosition> {
    let quarter = params.wavelength / 4.0;
    match n {
        0 => Vec::new(),
        1 => vec![AperturePosition::on_axis(0.0)],
        _ => (0..n)
            .map(|i| AperturePosition::on_axis(quarter * i as f64 / (n - 1) as f64))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanRecord {
    pub position: AperturePosition,
    /// Relative vacuum intensity `cos²(2πz/λ)`.
    pub u: f64,
    /// Averaged cavity output κ⟨n⟩ (photons/s).
    pub expected_flux: f64,
    /// Expected detector rate `S (flux + background) + dark` (counts/s).
    pub expected_rate: f64,
    pub counts: u64,
    /// The expected rate without noise, `counts / dwell` with Poisson
    /// noise (counts/s).
    pub rate: f64,
    pub warning: Option<String>,
}

/// Spontaneous-emission background `(⟨N⟩/τ) · 0.028 · 1e-4` (photons/s).
pub fn background_flux(mean_atoms: f64, tau: f64) -> Result<f64> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid("tau", format!("must be > 0, got {tau}")));
    }
    Ok(mean_atoms / tau * BACKGROUND_POPULATION_CHANGE * BACKGROUND_SOLID_ANGLE)
}

/// Relative intensity on the x = 0 slice.
pub fn relative_intensity(z: f64, params: &PhysicalParams) -> f64 {
    (params.wavenumber() * z).cos().powi(2)
}

fn poisson_draw(mean: f64, seed: u64, index: u64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    Poisson::new(mean)
        .map(|d| d.sample(&mut rng) as u64)
        .unwrap_or(0)
}

/// Averaged flux at one aperture position. A distribution still truncated at
/// the largest cutoff is returned with a warning instead of an error.
fn flux_at(pos: AperturePosition, base: &PumpBase, kernel: &PositionSpreadKernel) -> Result<(f64, Option<String>)> {
    match averaged_steady_state(pos, base, kernel) {
        Ok(p) => Ok((photon_flux(&p, base.params.kappa), None)),
        Err(Error::Truncated { n_max, tail }) => {
            let pump = AveragedPump::new(base, pos, kernel)?;
            let p = steady_state_product(&pump, MAX_N_MAX);
            Ok((
                photon_flux(&p, base.params.kappa),
                Some(format!("truncated at n_max = {n_max}, p(n_max) = {tail:e}")),
            ))
        }
        Err(e) => Err(e),
    }
}

/// Simulate a scan. Record `i` draws its noise from stream `i` of the seeded
/// generator, so the result does not depend on evaluation order.
pub fn simulate_scan(
    base: &PumpBase,
    kernel: &PositionSpreadKernel,
    scan: &ScanConfig,
) -> Result<Vec<ScanRecord>> {
    scan.validate()?;
    let background = if scan.background {
        background_flux(base.mean_atoms, base.mean_tau())?
    } else {
        0.0
    };
    scan.positions
        .iter()
        .enumerate()
        .map(|(i, &pos)| {
            let (flux, warning) = flux_at(pos, base, kernel)?;
            let expected_rate = scan.scale * (flux + background) + scan.dark_rate;
            let mean_counts = expected_rate * scan.dwell;
            let (counts, rate) = match scan.noise {
                NoiseModel::None => (mean_counts.round() as u64, expected_rate),
                NoiseModel::Poisson => {
                    let c = poisson_draw(mean_counts, scan.seed, i as u64);
                    (c, c as f64 / scan.dwell)
                }
            };
            Ok(ScanRecord {
                position: pos,
                u: relative_intensity(pos.z, &base.params),
                expected_flux: flux,
                expected_rate,
                counts,
                rate,
                warning,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceMap {
    pub xs: Vec<f64>,
    pub zs: Vec<f64>,
    /// `flux[iz][ix]` in photons/s.
    pub flux: Vec<Vec<f64>>,
    pub warning: Option<String>,
}

/// Linear-regime output `(⟨N⟩/τ̄)(g₀τ̄)² ψ(x,z)²` on a grid.
pub fn surface_map(base: &PumpBase, xs: &[f64], zs: &[f64]) -> SurfaceMap {
    let tau = base.mean_tau();
    let g0 = base.params.peak_coupling();
    let strength = base.mean_atoms * (g0 * tau).powi(2);
    let peak = base.mean_atoms / tau * (g0 * tau).powi(2);
    let flux = zs
        .iter()
        .map(|&z| {
            xs.iter()
                .map(|&x| peak * mode_function(AperturePosition::new(x, z), &base.params).powi(2))
                .collect()
        })
        .collect();
    let warning = (strength >= 0.1).then(|| {
        format!("outside the linear regime: ⟨N⟩ (g₀τ̄)² = {strength:.3} >= 0.1")
    });
    SurfaceMap {
        xs: xs.to_vec(),
        zs: zs.to_vec(),
        flux,
        warning,
    }
}
