//! Scenario configuration. One JSON document describes one physical
//! scenario; every key carries its unit and everything is converted to SI
//! on load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{build_spread_kernel, PositionSpreadKernel, PumpBase, SpreadAxis, VelocityDistribution, DEFAULT_VELOCITY_NODES};
use crate::error::{Error, Result};
use crate::physics::{effective_mean_atom_number, AperturePosition, PhysicalParams, V_PER_CM_TO_V_PER_M};
use crate::scan::{NoiseModel, ScanConfig, DEFAULT_SCAN_POINTS};
use crate::trajectory::{InitialField, TrajectoryConfig, DEFAULT_A_MAX, DEFAULT_N_MAX};

const NM: f64 = 1e-9;
const UM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub physics: PhysicsSection,
    pub beam: BeamSection,
    /// Absent means a delta kernel.
    #[serde(default)]
    pub kernel: Option<KernelSection>,
    #[serde(default)]
    pub steady: SteadySection,
    #[serde(default)]
    pub scan: ScanSection,
    #[serde(default)]
    pub map2d: MapSection,
    #[serde(default)]
    pub trajectories: TrajectorySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSection {
    pub wavelength_nm: f64,
    pub waist_um: f64,
    pub kappa_per_s: f64,
    pub dipole_c_m: f64,
    pub e_vac0_v_per_cm: f64,
    pub gamma_per_s: f64,
    pub rho_ee0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamSection {
    /// Effective ⟨N⟩. Exclusive with `total_atoms`.
    #[serde(default)]
    pub mean_atoms: Option<f64>,
    /// Total atom number in the virtual box, corrected by `2 ρ_ee0 − 1`.
    #[serde(default)]
    pub total_atoms: Option<f64>,
    pub velocity_mean_m_per_s: f64,
    /// Zero gives a single velocity.
    #[serde(default)]
    pub velocity_spread_m_per_s: f64,
    #[serde(default = "default_velocity_nodes")]
    pub velocity_nodes: usize,
    /// `(velocity m/s, weight)` pairs; replaces the Gaussian when present.
    #[serde(default)]
    pub velocity_table: Option<Vec<(f64, f64)>>,
}

fn default_velocity_nodes() -> usize {
    DEFAULT_VELOCITY_NODES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub hole_diameter_nm: f64,
    pub divergence_mrad: f64,
    pub standoff_um: f64,
    /// Defaults to the scan pitch.
    #[serde(default)]
    pub pitch_nm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteadySection {
    #[serde(default)]
    pub x_um: f64,
    #[serde(default)]
    pub z_nm: f64,
}

impl Default for SteadySection {
    fn default() -> Self {
        SteadySection { x_um: 0.0, z_nm: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    #[serde(default = "default_scan_points")]
    pub points: usize,
    #[serde(default)]
    pub x_um: f64,
    #[serde(default)]
    pub z_start_nm: f64,
    /// Defaults to `z_start + λ/4`.
    #[serde(default)]
    pub z_end_nm: Option<f64>,
    #[serde(default = "one")]
    pub dwell_s: f64,
    /// Detector counts per cavity photon.
    #[serde(default = "one")]
    pub detector_efficiency: f64,
    #[serde(default)]
    pub dark_cps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default = "yes")]
    pub background: bool,
}

fn default_scan_points() -> usize {
    DEFAULT_SCAN_POINTS
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            points: DEFAULT_SCAN_POINTS,
            x_um: 0.0,
            z_start_nm: 0.0,
            z_end_nm: None,
            dwell_s: 1.0,
            detector_efficiency: 1.0,
            dark_cps: 0.0,
            seed: 0,
            noise: NoiseModel::Poisson,
            background: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSection {
    pub x_min_um: f64,
    pub x_max_um: f64,
    pub x_points: usize,
    pub z_min_nm: f64,
    pub z_max_nm: f64,
    pub z_points: usize,
}

impl Default for MapSection {
    fn default() -> Self {
        MapSection {
            x_min_um: -40.0,
            x_max_um: 40.0,
            x_points: 81,
            z_min_nm: -400.0,
            z_max_nm: 400.0,
            z_points: 81,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    /// Simulated time in units of 1/κ.
    #[serde(default = "default_t_final")]
    pub t_final_kappa: f64,
    /// Checkpoint times in units of 1/κ; empty gives ten even steps.
    #[serde(default)]
    pub checkpoints_kappa: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_a_max")]
    pub a_max: usize,
    #[serde(default = "default_traj_n_max")]
    pub n_max: usize,
    /// Initial Fock state; zero is the vacuum.
    #[serde(default)]
    pub initial_fock: usize,
    #[serde(default)]
    pub x_um: f64,
    #[serde(default)]
    pub z_nm: f64,
}

fn default_trajectories() -> usize {
    1000
}

fn default_t_final() -> f64 {
    5.0
}

fn default_a_max() -> usize {
    DEFAULT_A_MAX
}

fn default_traj_n_max() -> usize {
    DEFAULT_N_MAX
}

impl Default for TrajectorySection {
    fn default() -> Self {
        TrajectorySection {
            trajectories: default_trajectories(),
            t_final_kappa: default_t_final(),
            checkpoints_kappa: Vec::new(),
            seed: 0,
            a_max: DEFAULT_A_MAX,
            n_max: DEFAULT_N_MAX,
            initial_fock: 0,
            x_um: 0.0,
            z_nm: 0.0,
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.base()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let s = Self::from_json(&text)?;
        Ok((s, sha256_hex(text.as_bytes())))
    }

    pub fn params(&self) -> PhysicalParams {
        let p = &self.physics;
        PhysicalParams {
            wavelength: p.wavelength_nm * NM,
            waist: p.waist_um * UM,
            kappa: p.kappa_per_s,
            dipole: p.dipole_c_m,
            e_vac0: p.e_vac0_v_per_cm * V_PER_CM_TO_V_PER_M,
            gamma: p.gamma_per_s,
            rho_ee0: p.rho_ee0,
        }
    }

    pub fn velocity(&self) -> Result<VelocityDistribution> {
        let b = &self.beam;
        match &b.velocity_table {
            Some(t) => VelocityDistribution::tabulated(t),
            None if b.velocity_spread_m_per_s == 0.0 => VelocityDistribution::delta(b.velocity_mean_m_per_s),
            None => VelocityDistribution::truncated_gaussian(
                b.velocity_mean_m_per_s,
                b.velocity_spread_m_per_s,
                b.velocity_nodes,
            ),
        }
    }

    pub fn mean_atoms(&self) -> Result<f64> {
        match (self.beam.mean_atoms, self.beam.total_atoms) {
            (Some(n), None) => Ok(n),
            (None, Some(t)) => Ok(effective_mean_atom_number(t, self.physics.rho_ee0)),
            _ => Err(Error::Config("beam needs exactly one of mean_atoms and total_atoms".into())),
        }
    }

    pub fn base(&self) -> Result<PumpBase> {
        PumpBase::new(self.params(), self.mean_atoms()?, self.velocity()?)
    }

    pub fn scan_positions(&self) -> Vec<AperturePosition> {
        let s = &self.scan;
        let z0 = s.z_start_nm * NM;
        let z1 = s.z_end_nm.map_or(z0 + self.params().wavelength / 4.0, |z| z * NM);
        let x = s.x_um * UM;
        match s.points {
            0 => Vec::new(),
            1 => vec![AperturePosition::new(x, z0)],
            n => (0..n)
                .map(|i| AperturePosition::new(x, z0 + (z1 - z0) * i as f64 / (n - 1) as f64))
                .collect(),
        }
    }

    pub fn scan_pitch(&self) -> Result<f64> {
        let p = self.scan_positions();
        if p.len() < 2 {
            return Err(Error::Config("scan needs at least two points".into()));
        }
        Ok((p[p.len() - 1].z - p[0].z) / (p.len() - 1) as f64)
    }

    pub fn scan_config(&self) -> ScanConfig {
        let s = &self.scan;
        ScanConfig {
            positions: self.scan_positions(),
            dwell: s.dwell_s,
            scale: s.detector_efficiency,
            dark_rate: s.dark_cps,
            seed: s.seed,
            noise: s.noise,
            background: s.background,
        }
    }

    pub fn kernel(&self) -> Result<PositionSpreadKernel> {
        match &self.kernel {
            None => Ok(PositionSpreadKernel::delta(self.scan_pitch().unwrap_or(1.0))),
            Some(k) => {
                let pitch = match k.pitch_nm {
                    Some(p) => p * NM,
                    None => self.scan_pitch()?.abs(),
                };
                Ok(build_spread_kernel(
                    k.hole_diameter_nm * NM,
                    k.divergence_mrad * 1e-3,
                    k.standoff_um * UM,
                    pitch,
                )?
                .with_axis(SpreadAxis::Z))
            }
        }
    }

    pub fn steady_position(&self) -> AperturePosition {
        AperturePosition::new(self.steady.x_um * UM, self.steady.z_nm * NM)
    }

    pub fn map_grid(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = &self.map2d;
        if m.x_points == 0 || m.z_points == 0 {
            return Err(Error::Config("map2d needs at least one point per axis".into()));
        }
        Ok((
            linspace(m.x_min_um * UM, m.x_max_um * UM, m.x_points),
            linspace(m.z_min_nm * NM, m.z_max_nm * NM, m.z_points),
        ))
    }

    pub fn trajectory_position(&self) -> AperturePosition {
        AperturePosition::new(self.trajectories.x_um * UM, self.trajectories.z_nm * NM)
    }

    pub fn trajectory_config(&self) -> TrajectoryConfig {
        let t = &self.trajectories;
        let kappa = self.physics.kappa_per_s;
        let mut cfg = TrajectoryConfig::new(t.trajectories, t.t_final_kappa / kappa, t.seed);
        cfg.a_max = t.a_max;
        cfg.n_max = t.n_max;
        cfg.checkpoints = t.checkpoints_kappa.iter().map(|c| c / kappa).collect();
        cfg.initial = match t.initial_fock {
            0 => InitialField::Vacuum,
            n => InitialField::Fock(n),
        };
        cfg
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "physics": {
            "wavelength_nm": 791.1, "waist_um": 20, "kappa_per_s": 1.885e6,
            "dipole_c_m": 2.086e-29, "e_vac0_v_per_cm": 0.86,
            "gamma_per_s": 3.1e5, "rho_ee0": 0.86
        },
        "beam": { "mean_atoms": 1.5, "velocity_mean_m_per_s": 670, "velocity_spread_m_per_s": 67 }
    }"#;

    #[test]
    fn units_convert_to_si() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        let p = s.params();
        assert_eq!(p.e_vac0, 86.0);
        assert!((p.wavelength - 791.1e-9).abs() < 1e-21);
        assert!((p.waist - 20e-6).abs() < 1e-18);
        assert_eq!(s.velocity().unwrap().nodes().len(), DEFAULT_VELOCITY_NODES);
        assert!(s.kernel().unwrap().is_delta());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("\"waist_um\"", "\"waist_m\"");
        assert!(matches!(Scenario::from_json(&bad), Err(Error::Config(_))));
        let extra = MINIMAL.replace("\"beam\"", "\"colour\": 1, \"beam\"");
        assert!(Scenario::from_json(&extra).is_err());
    }

    #[test]
    fn atom_number_is_exclusive() {
        let both = MINIMAL.replace("\"mean_atoms\": 1.5", "\"mean_atoms\": 1.5, \"total_atoms\": 2");
        assert!(Scenario::from_json(&both).is_err());
        let total = MINIMAL.replace("\"mean_atoms\": 1.5", "\"total_atoms\": 2");
        let s = Scenario::from_json(&total).unwrap();
        assert!((s.mean_atoms().unwrap() - 2.0 * 0.72).abs() < 1e-12);
    }

    #[test]
    fn default_scan_spans_a_quarter_wave() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        let pos = s.scan_positions();
        assert_eq!(pos.len(), DEFAULT_SCAN_POINTS);
        assert!((pos[40].z - 791.1e-9 / 4.0).abs() < 1e-20);
        assert!((s.scan_pitch().unwrap() - 791.1e-9 / 160.0).abs() < 1e-20);
    }

    #[test]
    fn invalid_physics_is_a_config_error() {
        let bad = MINIMAL.replace("\"rho_ee0\": 0.86", "\"rho_ee0\": 1.5");
        assert!(Scenario::from_json(&bad).is_err());
    }
}
