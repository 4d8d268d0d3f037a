//! Richardson–Lucy deconvolution of z-scan data against the position-spread
//! kernel, and the change of variable to relative vacuum intensity.

use serde::Serialize;

use crate::ensemble::PositionSpreadKernel;
use crate::error::{Error, Result};

/// Default number of iterations.
pub const DEFAULT_ITERATIONS: usize = 50;
/// Default floor, relative to the series maximum.
pub const DEFAULT_EPSILON: f64 = 1e-12;
/// Threshold for the optional early stop on the max relative update.
pub const EARLY_STOP_TOL: f64 = 1e-6;

const PITCH_TOL: f64 = 1e-6;

/// Values on a uniform z grid `z_i = z0 + i * pitch`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalSeries {
    z0: f64,
    pitch: f64,
    values: Vec<f64>,
}

impl SignalSeries {
    pub fn new(z0: f64, pitch: f64, values: Vec<f64>) -> Result<Self> {
        if !(pitch.is_finite() && pitch > 0.0) {
            return Err(Error::invalid("pitch", format!("must be > 0, got {pitch}")));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("values", "must be finite and >= 0"));
        }
        Ok(SignalSeries { z0, pitch, values })
    }

    /// Build from explicit grid points, which must be increasing with a
    /// constant pitch (relative tolerance 1e-6).
    pub fn from_points(z: &[f64], values: Vec<f64>) -> Result<Self> {
        if z.len() != values.len() {
            return Err(Error::invalid("values", "length differs from the z grid"));
        }
        if z.len() < 2 {
            return Err(Error::invalid("z", "need at least two grid points"));
        }
        let pitch = (z[z.len() - 1] - z[0]) / (z.len() - 1) as f64;
        if let Some(i) = (1..z.len()).find(|&i| ((z[i] - z[i - 1]) - pitch).abs() > PITCH_TOL * pitch.abs()) {
            return Err(Error::invalid(
                "z",
                format!("grid pitch is not constant at index {i}"),
            ));
        }
        Self::new(z[0], pitch, values)
    }

    pub fn z0(&self) -> f64 {
        self.z0
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn z(&self) -> Vec<f64> {
        (0..self.values.len())
            .map(|i| self.z0 + i as f64 * self.pitch)
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        SignalSeries {
            values,
            ..self.clone()
        }
    }
}

/// Blur matrix on a finite grid. Kernel taps that fall outside the grid are
/// folded back by half-sample reflection, so every row keeps unit sum and,
/// the kernel being symmetric, so does every column.
#[derive(Debug, Clone)]
struct BlurOperator {
    rows: Vec<Vec<(usize, f64)>>,
}

fn reflect(k: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = k.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

impl BlurOperator {
    fn new(kernel: &PositionSpreadKernel, len: usize) -> Self {
        let half = kernel.half_len() as isize;
        let rows = (0..len)
            .map(|i| {
                let mut row: Vec<(usize, f64)> = Vec::new();
                for (t, &w) in kernel.weights().iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let j = reflect(i as isize + t as isize - half, len);
                    match row.iter_mut().find(|(c, _)| *c == j) {
                        Some(entry) => entry.1 += w,
                        None => row.push((j, w)),
                    }
                }
                row.sort_by_key(|(c, _)| *c);
                row
            })
            .collect();
        BlurOperator { rows }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }

    fn apply_transpose(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; r.len()];
        for (row, &ri) in self.rows.iter().zip(r) {
            for &(j, w) in row {
                out[j] += w * ri;
            }
        }
        out
    }
}

fn check_kernel(series: &SignalSeries, kernel: &PositionSpreadKernel) -> Result<()> {
    let total: f64 = kernel.weights().iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("kernel", format!("weights sum to {total}, expected 1")));
    }
    if !kernel.is_delta() && (kernel.pitch() - series.pitch()).abs() > PITCH_TOL * series.pitch() {
        return Err(Error::PitchMismatch {
            kernel: kernel.pitch(),
            signal: series.pitch(),
        });
    }
    Ok(())
}

/// Forward blur with the same edge rule the deconvolution assumes.
pub fn blur(series: &SignalSeries, kernel: &PositionSpreadKernel) -> Result<SignalSeries> {
    check_kernel(series, kernel)?;
    let op = BlurOperator::new(kernel, series.len());
    Ok(series.with_values(op.apply(series.values())))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlOptions {
    pub iterations: usize,
    /// Floor ε relative to the maximum of the observed series.
    pub epsilon: f64,
    /// Stop once the max relative update falls below this value.
    pub early_stop: Option<f64>,
}

impl Default for RlOptions {
    fn default() -> Self {
        RlOptions {
            iterations: DEFAULT_ITERATIONS,
            epsilon: DEFAULT_EPSILON,
            early_stop: None,
        }
    }
}

/// Iteration state of the Richardson–Lucy update
/// `e ← e · Kᵀ(y / (K e + ε))`, started from the observed series.
#[derive(Debug, Clone)]
pub struct RichardsonLucy {
    observed: SignalSeries,
    op: BlurOperator,
    floor: f64,
    estimate: Vec<f64>,
    iterations: usize,
}

impl RichardsonLucy {
    pub fn new(observed: &SignalSeries, kernel: &PositionSpreadKernel, epsilon: f64) -> Result<Self> {
        check_kernel(observed, kernel)?;
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::invalid("epsilon", format!("must be > 0, got {epsilon}")));
        }
        let max = observed.values().iter().copied().fold(0.0, f64::max);
        Ok(RichardsonLucy {
            observed: observed.clone(),
            op: BlurOperator::new(kernel, observed.len()),
            floor: epsilon * max,
            estimate: observed.values().to_vec(),
            iterations: 0,
        })
    }

    /// One update. Returns the max relative change of the estimate.
    pub fn step(&mut self) -> f64 {
        if self.floor == 0.0 {
            // all-zero input is a fixed point
            self.iterations += 1;
            return 0.0;
        }
        let model = self.op.apply(&self.estimate);
        let ratio: Vec<f64> = self
            .observed
            .values()
            .iter()
            .zip(&model)
            .map(|(y, m)| y / (m + self.floor))
            .collect();
        let correction = self.op.apply_transpose(&ratio);
        let mut max_rel: f64 = 0.0;
        for (e, c) in self.estimate.iter_mut().zip(correction) {
            let next = *e * c;
            if *e > 0.0 {
                max_rel = max_rel.max((next - *e).abs() / *e);
            }
            *e = next;
        }
        self.iterations += 1;
        max_rel
    }

    pub fn estimate(&self) -> SignalSeries {
        self.observed.with_values(self.estimate.clone())
    }

    pub fn estimate_values(&self) -> &[f64] {
        &self.estimate
    }

    /// `K e` for the current estimate.
    pub fn reblurred(&self) -> Vec<f64> {
        self.op.apply(&self.estimate)
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Poisson log-likelihood `Σ y ln(K e) − K e` of the observed data, up to
    /// a constant.
    pub fn log_likelihood(&self) -> f64 {
        self.observed
            .values()
            .iter()
            .zip(self.reblurred())
            .map(|(&y, m)| if y > 0.0 { y * m.ln() - m } else { -m })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RlOutcome {
    pub series: SignalSeries,
    pub iterations: usize,
    /// Absolute floor used in the update.
    pub floor: f64,
}

pub fn richardson_lucy(
    observed: &SignalSeries,
    kernel: &PositionSpreadKernel,
    options: RlOptions,
) -> Result<RlOutcome> {
    let mut rl = RichardsonLucy::new(observed, kernel, options.epsilon)?;
    for _ in 0..options.iterations {
        let change = rl.step();
        if options.early_stop.is_some_and(|tol| change < tol) {
            break;
        }
    }
    Ok(RlOutcome {
        series: rl.estimate(),
        iterations: rl.iterations(),
        floor: rl.floor,
    })
}

/// `(u, value)` pairs with `u = cos²(2π(z − z_antinode)/λ)`, in grid order.
pub fn to_intensity_axis(series: &SignalSeries, wavelength: f64, z_antinode: f64) -> Vec<(f64, f64)> {
    let k = 2.0 * std::f64::consts::PI / wavelength;
    series
        .z()
        .into_iter()
        .zip(series.values())
        .map(|(z, &v)| ((k * (z - z_antinode)).cos().powi(2), v))
        .collect()
}

/// Antinode position from a least-squares fit of
/// `a cos²(k(z − z₀)) + c` to the series. Written as
/// `A + B cos 2kz + C sin 2kz` the fit is linear and `z₀ = atan2(C, B) / 2k`,
/// taken in the half-wavelength period nearest the start of the grid.
pub fn estimate_antinode(series: &SignalSeries, wavelength: f64) -> Result<f64> {
    if series.len() < 3 {
        return Err(Error::invalid("series", "need at least three points to locate the antinode"));
    }
    let k2 = 4.0 * std::f64::consts::PI / wavelength;
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for (z, &y) in series.z().into_iter().zip(series.values()) {
        let row = [1.0, (k2 * z).cos(), (k2 * z).sin()];
        for r in 0..3 {
            atb[r] += row[r] * y;
            for c in 0..3 {
                ata[r][c] += row[r] * row[c];
            }
        }
    }
    let ata = ata.iter().map(|r| r.to_vec()).collect();
    let sol = crate::linalg::solve(ata, atb.to_vec()).ok_or_else(|| {
        Error::invalid("series", "grid does not determine the standing-wave phase")
    })?;
    let (b, c) = (sol[1], sol[2]);
    if b.hypot(c) <= 0.0 {
        return Err(Error::invalid("series", "no standing-wave modulation"));
    }
    let z0 = c.atan2(b) / k2;
    let period = wavelength / 2.0;
    let shift = ((series.z0() - z0) / period).round();
    Ok(z0 + shift * period)
}
