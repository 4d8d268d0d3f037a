//! Averaging the single-atom gain over the atomic velocity distribution and
//! over the transverse position spread of atoms leaving the nanoholes.
//!
//! The gain is averaged first and the master equation is solved once with
//! the averaged gain. Since the diagonal kinetics stay a birth–death process,
//! this only changes the birth rates:
//!
//! ```text
//! ξ_k = R Σ_j w_j sin²(√k g_j τ_j),     R = ⟨N⟩ / Σ_j w_j τ_j
//! ```
//!
//! where `j` runs over (velocity node, kernel offset) pairs. The cheaper
//! "average of outputs" variant is kept as a diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinetics::{self, GainChannel, GainSource, PhotonDistribution, PumpParams};
use crate::physics::{coupling_at, interaction_time, AperturePosition, PhysicalParams};
use crate::quadrature::gauss_legendre_on;

/// Default number of Gauss–Legendre velocity nodes.
pub const DEFAULT_VELOCITY_NODES: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityKind {
    Delta,
    TruncatedGaussian,
    Tabulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VelocityNode {
    /// m/s
    pub velocity: f64,
    /// Fraction of arriving atoms.
    pub weight: f64,
}

/// Discrete velocity distribution of the arriving atoms (flux weighted).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VelocityDistribution {
    kind: VelocityKind,
    mean: f64,
    spread: f64,
    nodes: Vec<VelocityNode>,
}

impl VelocityDistribution {
    pub fn delta(velocity: f64) -> Result<Self> {
        if !(velocity.is_finite() && velocity > 0.0) {
            return Err(Error::invalid("velocity", format!("must be > 0, got {velocity}")));
        }
        Ok(VelocityDistribution {
            kind: VelocityKind::Delta,
            mean: velocity,
            spread: 0.0,
            nodes: vec![VelocityNode {
                velocity,
                weight: 1.0,
            }],
        })
    }

    /// Gaussian of the given mean and standard deviation, truncated to
    /// `mean ± 3 spread` (and to positive velocities), sampled with an
    /// `n_nodes`-point Gauss–Legendre rule.
    pub fn truncated_gaussian(mean: f64, spread: f64, n_nodes: usize) -> Result<Self> {
        if !(spread.is_finite() && spread >= 0.0) {
            return Err(Error::invalid("spread", format!("must be >= 0, got {spread}")));
        }
        if spread == 0.0 {
            return Self::delta(mean);
        }
        if !(mean.is_finite() && mean > 0.0) {
            return Err(Error::invalid("mean velocity", format!("must be > 0, got {mean}")));
        }
        if n_nodes == 0 {
            return Err(Error::invalid("velocity_nodes", "need at least one node"));
        }
        let lo = (mean - 3.0 * spread).max(1e-6 * mean);
        let hi = mean + 3.0 * spread;
        let mut nodes: Vec<VelocityNode> = gauss_legendre_on(n_nodes, lo, hi)
            .into_iter()
            .map(|(v, w)| VelocityNode {
                velocity: v,
                weight: w * (-0.5 * ((v - mean) / spread).powi(2)).exp(),
            })
            .collect();
        let total: f64 = nodes.iter().map(|n| n.weight).sum();
        nodes.iter_mut().for_each(|n| n.weight /= total);
        Ok(VelocityDistribution {
            kind: VelocityKind::TruncatedGaussian,
            mean,
            spread,
            nodes,
        })
    }

    /// Measured beam data as `(velocity, weight)` pairs; weights are
    /// renormalized.
    pub fn tabulated(pairs: &[(f64, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("velocity table", "empty"));
        }
        if pairs.iter().any(|(v, w)| !(v.is_finite() && *v > 0.0) || !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(
                "velocity table",
                "velocities must be > 0 and weights >= 0",
            ));
        }
        let total: f64 = pairs.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(Error::invalid("velocity table", "weights sum to zero"));
        }
        let nodes: Vec<VelocityNode> = pairs
            .iter()
            .map(|&(velocity, w)| VelocityNode {
                velocity,
                weight: w / total,
            })
            .collect();
        let mean = nodes.iter().map(|n| n.velocity * n.weight).sum::<f64>();
        let spread = nodes
            .iter()
            .map(|n| n.weight * (n.velocity - mean).powi(2))
            .sum::<f64>()
            .sqrt();
        Ok(VelocityDistribution {
            kind: VelocityKind::Tabulated,
            mean,
            spread,
            nodes,
        })
    }

    pub fn kind(&self) -> &VelocityKind {
        &self.kind
    }

    pub fn nodes(&self) -> &[VelocityNode] {
        &self.nodes
    }

    /// Nominal mean velocity.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn spread(&self) -> f64 {
        self.spread
    }

    /// Flux-weighted mean interaction time `Σ w_j τ_j`.
    pub fn mean_interaction_time(&self, params: &PhysicalParams) -> Result<f64> {
        self.nodes.iter().try_fold(0.0, |acc, n| {
            Ok(acc + n.weight * interaction_time(n.velocity, params)?)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadAxis {
    /// Spread along the standing-wave axis only.
    Z,
    /// The same profile applied independently along x and z.
    Xz,
}

/// Symmetric discrete kernel of atomic position offsets around the aperture
/// position. Offsets are `i * pitch` for `i = -h..=h`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionSpreadKernel {
    axis: SpreadAxis,
    pitch: f64,
    weights: Vec<f64>,
}

impl PositionSpreadKernel {
    /// All atoms exactly at the aperture position.
    pub fn delta(pitch: f64) -> Self {
        PositionSpreadKernel {
            axis: SpreadAxis::Z,
            pitch,
            weights: vec![1.0],
        }
    }

    /// Kernel from explicit weights on a centered grid. The weights must be
    /// nonnegative, symmetric and sum to one within `1e-9`.
    pub fn from_weights(pitch: f64, weights: Vec<f64>) -> Result<Self> {
        if !(pitch.is_finite() && pitch > 0.0) {
            return Err(Error::invalid("pitch", format!("must be > 0, got {pitch}")));
        }
        if weights.len().is_multiple_of(2) {
            return Err(Error::invalid("kernel", "needs an odd number of taps centered on 0"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("kernel", "weights must be finite and >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("kernel", format!("weights sum to {total}, expected 1")));
        }
        let n = weights.len();
        for i in 0..n / 2 {
            let (a, b) = (weights[i], weights[n - 1 - i]);
            if (a - b).abs() > 1e-9 * a.max(b).max(1e-300) && (a - b).abs() > 1e-15 {
                return Err(Error::invalid("kernel", "weights are not symmetric about 0"));
            }
        }
        Ok(PositionSpreadKernel {
            axis: SpreadAxis::Z,
            pitch,
            weights,
        })
    }

    pub fn with_axis(mut self, axis: SpreadAxis) -> Self {
        self.axis = axis;
        self
    }

    pub fn axis(&self) -> SpreadAxis {
        self.axis
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of taps on each side of the center.
    pub fn half_len(&self) -> usize {
        self.weights.len() / 2
    }

    pub fn offsets(&self) -> impl Iterator<Item = f64> + '_ {
        let h = self.half_len() as isize;
        (-h..=h).map(move |i| i as f64 * self.pitch)
    }

    pub fn is_delta(&self) -> bool {
        self.weights.len() == 1
    }

    pub fn mean(&self) -> f64 {
        self.offsets().zip(&self.weights).map(|(o, w)| o * w).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.offsets()
            .zip(&self.weights)
            .map(|(o, w)| w * (o - m).powi(2))
            .sum()
    }

    /// Position taps `(dx, dz, weight)` with zero-weight taps skipped.
    pub fn taps(&self) -> Vec<(f64, f64, f64)> {
        let one_d: Vec<(f64, f64)> = self
            .offsets()
            .zip(self.weights.iter().copied())
            .filter(|(_, w)| *w > 0.0)
            .collect();
        match self.axis {
            SpreadAxis::Z => one_d.iter().map(|&(o, w)| (0.0, o, w)).collect(),
            SpreadAxis::Xz => one_d
                .iter()
                .flat_map(|&(ox, wx)| one_d.iter().map(move |&(oz, wz)| (ox, oz, wx * wz)))
                .collect(),
        }
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// CDF of the projection of a uniform disc of radius `r` onto a diameter.
fn semicircle_cdf(x: f64, r: f64) -> f64 {
    if x <= -r {
        0.0
    } else if x >= r {
        1.0
    } else {
        let s = x / r;
        0.5 + (s * (1.0 - s * s).sqrt() + s.asin()) / std::f64::consts::PI
    }
}

/// Position-spread kernel of atoms from a hole of the given diameter, after
/// free flight over `standoff` with angular divergence `divergence`: the
/// projected uniform disc convolved with a Gaussian of
/// `σ = divergence · standoff`, integrated over cells of width `pitch`.
///
/// A kernel whose whole support fits inside the central cell collapses to a
/// delta. A kernel that spills into neighbouring cells but whose rms full
/// width `2 sqrt(r²/4 + σ²)` is below the pitch is under-resolved and
/// rejected.
pub fn build_spread_kernel(
    hole_diameter: f64,
    divergence: f64,
    standoff: f64,
    pitch: f64,
) -> Result<PositionSpreadKernel> {
    for (name, v) in [
        ("hole_diameter", hole_diameter),
        ("divergence", divergence),
        ("standoff", standoff),
        ("pitch", pitch),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(name, format!("must be > 0, got {v}")));
        }
    }
    let r = 0.5 * hole_diameter;
    let sigma = divergence * standoff;
    let support = r + 6.0 * sigma;
    if support <= 0.5 * pitch {
        return Ok(PositionSpreadKernel::delta(pitch));
    }
    let rms_width = 2.0 * (r * r / 4.0 + sigma * sigma).sqrt();
    if pitch > rms_width {
        return Err(Error::invalid(
            "pitch",
            format!("{pitch:e} m is coarser than the kernel width {rms_width:e} m"),
        ));
    }

    let half = (support / pitch).ceil() as isize;
    // Cell mass of (semicircle ⊗ Gaussian): average the Gaussian cell mass
    // over the disc projection with s = r sin θ, density ∝ cos²θ.
    const N_THETA: usize = 2000;
    let thetas: Vec<(f64, f64)> = (0..N_THETA)
        .map(|i| {
            let th = -std::f64::consts::FRAC_PI_2
                + std::f64::consts::PI * (i as f64 + 0.5) / N_THETA as f64;
            (r * th.sin(), th.cos().powi(2))
        })
        .collect();
    let theta_norm: f64 = thetas.iter().map(|(_, w)| w).sum();
    let cell_mass = |a: f64, b: f64| -> f64 {
        if sigma == 0.0 {
            return semicircle_cdf(b, r) - semicircle_cdf(a, r);
        }
        if r == 0.0 {
            return normal_cdf(b / sigma) - normal_cdf(a / sigma);
        }
        thetas
            .iter()
            .map(|&(s, w)| w * (normal_cdf((b - s) / sigma) - normal_cdf((a - s) / sigma)))
            .sum::<f64>()
            / theta_norm
    };

    let mut weights: Vec<f64> = (-half..=half)
        .map(|i| {
            let c = i as f64 * pitch;
            cell_mass(c - 0.5 * pitch, c + 0.5 * pitch)
        })
        .collect();
    // exact symmetry
    let n = weights.len();
    for i in 0..n / 2 {
        let avg = 0.5 * (weights[i] + weights[n - 1 - i]);
        weights[i] = avg;
        weights[n - 1 - i] = avg;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    PositionSpreadKernel::from_weights(pitch, weights)
}

/// Physical parameters plus the beam: everything a pump needs except the
/// aperture position and the spread kernel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PumpBase {
    pub params: PhysicalParams,
    /// Effective mean atom number ⟨N⟩.
    pub mean_atoms: f64,
    pub velocity: VelocityDistribution,
}

impl PumpBase {
    pub fn new(params: PhysicalParams, mean_atoms: f64, velocity: VelocityDistribution) -> Result<Self> {
        params.validate()?;
        if !(mean_atoms.is_finite() && mean_atoms >= 0.0) {
            return Err(Error::invalid("mean_atoms", format!("must be >= 0, got {mean_atoms}")));
        }
        Ok(PumpBase {
            params,
            mean_atoms,
            velocity,
        })
    }

    pub fn with_mean_atoms(&self, mean_atoms: f64) -> Self {
        PumpBase {
            mean_atoms,
            ..self.clone()
        }
    }

    pub fn with_e_vac0(&self, e_vac0: f64) -> Self {
        PumpBase {
            params: self.params.with_e_vac0(e_vac0),
            ..self.clone()
        }
    }

    /// Flux-weighted mean interaction time τ̄ (s).
    pub fn mean_tau(&self) -> f64 {
        self.velocity
            .mean_interaction_time(&self.params)
            .expect("velocity nodes are validated positive")
    }

    /// Atom arrival rate `⟨N⟩ / τ̄` (1/s).
    pub fn injection_rate(&self) -> f64 {
        self.mean_atoms / self.mean_tau()
    }

    /// Single-channel pump at the mean interaction time and the local
    /// coupling at `pos`.
    pub fn point_pump(&self, pos: AperturePosition) -> Result<PumpParams> {
        PumpParams::new(
            self.mean_atoms,
            self.mean_tau(),
            coupling_at(pos, &self.params),
            self.params.kappa,
        )
    }
}

/// Pump whose gain is averaged over velocity nodes and kernel taps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AveragedPump {
    rate: f64,
    kappa: f64,
    channels: Vec<GainChannel>,
}

impl AveragedPump {
    pub fn new(base: &PumpBase, pos: AperturePosition, kernel: &PositionSpreadKernel) -> Result<Self> {
        let taps = kernel.taps();
        let mut channels = Vec::with_capacity(taps.len() * base.velocity.nodes().len());
        for node in base.velocity.nodes() {
            let tau = interaction_time(node.velocity, &base.params)?;
            for &(dx, dz, w) in &taps {
                let g = coupling_at(AperturePosition::new(pos.x + dx, pos.z + dz), &base.params);
                channels.push(GainChannel {
                    weight: node.weight * w,
                    g,
                    tau,
                });
            }
        }
        Ok(AveragedPump {
            rate: base.injection_rate(),
            kappa: base.params.kappa,
            channels,
        })
    }

    /// Velocity average only, at coupling `g`.
    pub fn velocity_averaged(base: &PumpBase, g: f64) -> Result<Self> {
        let channels = base
            .velocity
            .nodes()
            .iter()
            .map(|node| {
                Ok(GainChannel {
                    weight: node.weight,
                    g,
                    tau: interaction_time(node.velocity, &base.params)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AveragedPump {
            rate: base.injection_rate(),
            kappa: base.params.kappa,
            channels,
        })
    }
}

impl GainSource for AveragedPump {
    fn injection_rate(&self) -> f64 {
        self.rate
    }

    fn kappa(&self) -> f64 {
        self.kappa
    }

    fn channels(&self) -> &[GainChannel] {
        &self.channels
    }
}

/// Steady state with the gain averaged over the beam and the kernel.
pub fn averaged_steady_state(
    pos: AperturePosition,
    base: &PumpBase,
    kernel: &PositionSpreadKernel,
) -> Result<PhotonDistribution> {
    let pump = AveragedPump::new(base, pos, kernel)?;
    kinetics::steady_state(&pump)
}

/// Diagnostic variant: solve each (velocity, offset) class on its own at
/// the common arrival rate and average the mean photon numbers.
pub fn output_averaged_mean_photon(
    pos: AperturePosition,
    base: &PumpBase,
    kernel: &PositionSpreadKernel,
) -> Result<f64> {
    let pump = AveragedPump::new(base, pos, kernel)?;
    let rate = pump.injection_rate();
    pump.channels()
        .iter()
        .try_fold(0.0, |acc, c| {
            let single = PumpParams::new(rate * c.tau, c.tau, c.g, pump.kappa())?;
            Ok(acc + c.weight * kinetics::steady_state(&single)?.mean())
        })
}
