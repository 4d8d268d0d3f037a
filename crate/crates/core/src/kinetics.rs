//! Photon kinetics on the diagonal of the field density matrix.
//!
//! The field is described only by its photon-number distribution `p(n)`.
//! Each excited atom that crosses the cavity applies the gain map
//!
//! ```text
//! p'(n) = p(n) cos²(√(n+1) g τ) + p(n-1) sin²(√n g τ)
//! ```
//!
//! and the cavity decays with `ṗ(n) = κ[(n+1) p(n+1) - n p(n)]`. With
//! Poissonian arrivals at rate `⟨N⟩/τ` the combination is a birth–death
//! process whose steady state is the product formula
//! `p(n) = p(0) ∏ ξ_k / (κ k)`.

use serde::Serialize;

use crate::error::{Error, Result};

/// Tail probability at `n_max` above which a distribution is flagged as
/// truncated.
pub const TRUNCATION_TOL: f64 = 1e-10;

/// Default Fock-space cutoff.
pub const DEFAULT_N_MAX: usize = 40;

/// Largest cutoff reached by automatic escalation.
pub const MAX_N_MAX: usize = 160;

/// Diagonal photon-number distribution `p(0..=n_max)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhotonDistribution {
    probs: Vec<f64>,
    /// Probability that tried to climb past `n_max` and was held there.
    overflow: f64,
}

impl PhotonDistribution {
    pub fn vacuum(n_max: usize) -> Self {
        Self::fock(0, n_max)
    }

    /// Number state `|n⟩` in a space truncated at `n_max`.
    pub fn fock(n: usize, n_max: usize) -> Self {
        assert!(n <= n_max, "fock state {n} outside cutoff {n_max}");
        let mut probs = vec![0.0; n_max + 1];
        probs[n] = 1.0;
        PhotonDistribution {
            probs,
            overflow: 0.0,
        }
    }

    /// Builds a distribution from raw probabilities. They must be
    /// nonnegative and sum to one within `1e-12`.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probs", "empty distribution"));
        }
        if let Some(bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::invalid("probs", format!("negative or non-finite entry {bad}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("probs", format!("sum is {total}, expected 1")));
        }
        Ok(PhotonDistribution {
            probs,
            overflow: 0.0,
        })
    }

    /// Normalizes arbitrary nonnegative weights.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::invalid("weights", "must be nonnegative with positive sum"));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(PhotonDistribution {
            probs: weights,
            overflow: 0.0,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_max(&self) -> usize {
        self.probs.len() - 1
    }

    /// `p(n_max)`.
    pub fn tail(&self) -> f64 {
        *self.probs.last().unwrap()
    }

    pub fn overflow(&self) -> f64 {
        self.overflow
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// True when the cutoff visibly clips the distribution.
    pub fn is_truncated(&self) -> bool {
        self.tail() >= TRUNCATION_TOL || self.overflow >= TRUNCATION_TOL
    }

    pub fn mean(&self) -> f64 {
        mean_photon(self)
    }

    /// Copy extended with zeros up to `n_max`. Never shrinks.
    pub fn padded(&self, n_max: usize) -> Self {
        let mut probs = self.probs.clone();
        if probs.len() < n_max + 1 {
            probs.resize(n_max + 1, 0.0);
        }
        PhotonDistribution {
            probs,
            overflow: self.overflow,
        }
    }

    /// Largest absolute componentwise difference; the shorter vector is
    /// zero-padded.
    pub fn max_abs_diff(&self, other: &PhotonDistribution) -> f64 {
        let n = self.probs.len().max(other.probs.len());
        (0..n)
            .map(|i| {
                let a = self.probs.get(i).copied().unwrap_or(0.0);
                let b = other.probs.get(i).copied().unwrap_or(0.0);
                (a - b).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// One class of atoms: a fraction `weight` of all arrivals, each with
/// coupling `g` and interaction time `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainChannel {
    pub weight: f64,
    pub g: f64,
    pub tau: f64,
}

/// Anything that pumps the cavity with fully excited atoms.
///
/// Implementors describe the arrival rate, the per-atom channels and the
/// cavity decay; the kinetics below only ever need these three things.
pub trait GainSource {
    /// Atom arrival rate (1/s).
    fn injection_rate(&self) -> f64;
    fn kappa(&self) -> f64;
    fn channels(&self) -> &[GainChannel];

    /// Upward transition rate out of `|n⟩`, i.e. `ξ_{n+1}`.
    fn birth_rate(&self, n: usize) -> f64 {
        let root = ((n + 1) as f64).sqrt();
        let avg: f64 = self
            .channels()
            .iter()
            .map(|c| c.weight * (root * c.g * c.tau).sin().powi(2))
            .sum();
        self.injection_rate() * avg
    }

    /// `ξ_k` for `k >= 1`.
    fn xi(&self, k: usize) -> f64 {
        assert!(k >= 1, "xi is defined for k >= 1");
        self.birth_rate(k - 1)
    }
}

/// Single-channel pump: every atom has the same coupling and transit time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PumpParams {
    mean_atoms: f64,
    kappa: f64,
    channel: [GainChannel; 1],
}

impl PumpParams {
    pub fn new(mean_atoms: f64, tau: f64, g: f64, kappa: f64) -> Result<Self> {
        if !(mean_atoms.is_finite() && mean_atoms >= 0.0) {
            return Err(Error::invalid("mean_atoms", format!("must be >= 0, got {mean_atoms}")));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::invalid("tau", format!("must be > 0, got {tau}")));
        }
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::invalid("kappa", format!("must be > 0, got {kappa}")));
        }
        if !g.is_finite() {
            return Err(Error::invalid("g", "must be finite"));
        }
        Ok(PumpParams {
            mean_atoms,
            kappa,
            channel: [GainChannel { weight: 1.0, g, tau }],
        })
    }

    /// Effective mean atom number ⟨N⟩.
    pub fn mean_atoms(&self) -> f64 {
        self.mean_atoms
    }

    /// Interaction time τ (s).
    pub fn tau(&self) -> f64 {
        self.channel[0].tau
    }

    /// Coupling g (rad/s).
    pub fn g(&self) -> f64 {
        self.channel[0].g
    }

    /// Rabi angle `g τ` of the first photon.
    pub fn rabi_angle(&self) -> f64 {
        self.g() * self.tau()
    }
}

impl GainSource for PumpParams {
    fn injection_rate(&self) -> f64 {
        self.mean_atoms / self.tau()
    }

    fn kappa(&self) -> f64 {
        self.kappa
    }

    fn channels(&self) -> &[GainChannel] {
        &self.channel
    }
}

/// Field distribution after one fully excited atom with coupling `g`
/// interacts for `tau`. Probability that would leave `n_max` upward stays at
/// `n_max` and is added to the overflow accumulator.
pub fn gain_map(p: &PhotonDistribution, g: f64, tau: f64) -> PhotonDistribution {
    let n_max = p.n_max();
    let mut out = vec![0.0; n_max + 1];
    let mut overflow = p.overflow;
    for (n, &pn) in p.probs.iter().enumerate() {
        if pn == 0.0 {
            continue;
        }
        let up = (((n + 1) as f64).sqrt() * g * tau).sin().powi(2);
        if n == n_max {
            out[n] += pn;
            overflow += pn * up;
        } else {
            out[n] += pn * (1.0 - up);
            out[n + 1] += pn * up;
        }
    }
    PhotonDistribution {
        probs: out,
        overflow,
    }
}

/// Cavity-loss rate vector `κ[(n+1) p(n+1) - n p(n)]`.
pub fn loss_rate(p: &PhotonDistribution, kappa: f64) -> Vec<f64> {
    let probs = &p.probs;
    let n_max = p.n_max();
    (0..=n_max)
        .map(|n| {
            let inflow = if n < n_max {
                (n + 1) as f64 * probs[n + 1]
            } else {
                0.0
            };
            kappa * (inflow - n as f64 * probs[n])
        })
        .collect()
}

/// Largest time step the explicit integrator accepts for this pump and
/// cutoff: `0.1 min(τ/⟨N⟩, 1/(κ n_max))`.
pub fn max_stable_step<P: GainSource + ?Sized>(pump: &P, n_max: usize) -> f64 {
    let rate = pump.injection_rate();
    let gain_limit = if rate > 0.0 { 1.0 / rate } else { f64::INFINITY };
    let loss_limit = 1.0 / (pump.kappa() * n_max.max(1) as f64);
    0.1 * gain_limit.min(loss_limit)
}

struct Generator {
    birth: Vec<f64>,
    kappa: f64,
}

impl Generator {
    fn new<P: GainSource + ?Sized>(pump: &P, n_max: usize) -> Self {
        let mut birth: Vec<f64> = (0..=n_max).map(|n| pump.birth_rate(n)).collect();
        // clamped at the cutoff
        birth[n_max] = 0.0;
        Generator {
            birth,
            kappa: pump.kappa(),
        }
    }

    fn apply(&self, p: &[f64], out: &mut [f64]) {
        let n_max = p.len() - 1;
        for n in 0..=n_max {
            let mut d = -(self.birth[n] + self.kappa * n as f64) * p[n];
            if n > 0 {
                d += self.birth[n - 1] * p[n - 1];
            }
            if n < n_max {
                d += self.kappa * (n + 1) as f64 * p[n + 1];
            }
            out[n] = d;
        }
    }
}

/// Integrates the master equation from `p0` to `t_final` with classical RK4
/// at fixed step `dt` (the last step is shortened to land on `t_final`).
pub fn evolve<P: GainSource + ?Sized>(
    p0: &PhotonDistribution,
    pump: &P,
    t_final: f64,
    dt: f64,
) -> Result<PhotonDistribution> {
    let n_max = p0.n_max();
    let guard = max_stable_step(pump, n_max);
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
    }
    if dt > guard * (1.0 + 1e-12) {
        return Err(Error::invalid(
            "dt",
            format!("{dt:e} s exceeds the stability limit {guard:e} s"),
        ));
    }
    if !(t_final.is_finite() && t_final >= 0.0) {
        return Err(Error::invalid("t_final", format!("must be >= 0, got {t_final}")));
    }

    let gen = Generator::new(pump, n_max);
    let len = n_max + 1;
    let mut p = p0.probs.clone();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    let mut tmp = vec![0.0; len];

    let steps = (t_final / dt).ceil() as usize;
    let mut t = 0.0;
    for step in 0..steps {
        let h = if step + 1 == steps { t_final - t } else { dt };
        gen.apply(&p, &mut k1);
        for i in 0..len {
            tmp[i] = p[i] + 0.5 * h * k1[i];
        }
        gen.apply(&tmp, &mut k2);
        for i in 0..len {
            tmp[i] = p[i] + 0.5 * h * k2[i];
        }
        gen.apply(&tmp, &mut k3);
        for i in 0..len {
            tmp[i] = p[i] + h * k3[i];
        }
        gen.apply(&tmp, &mut k4);
        for i in 0..len {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;

        let (min_idx, min) = p
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
        if min < -1e-9 {
            return Err(Error::Unstable {
                time: t,
                reason: format!("p({min_idx}) = {min:e} went negative"),
            });
        }
        let norm: f64 = p.iter().sum();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Unstable {
                time: t,
                reason: format!("norm drifted to {norm}"),
            });
        }
    }
    // round-off level negatives are clipped
    for v in p.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    PhotonDistribution::from_weights(p)
}

/// [`evolve`] at the largest admissible step.
pub fn evolve_guarded<P: GainSource + ?Sized>(
    p0: &PhotonDistribution,
    pump: &P,
    t_final: f64,
) -> Result<PhotonDistribution> {
    let dt = max_stable_step(pump, p0.n_max());
    evolve(p0, pump, t_final, dt)
}

/// Closed-form steady state of the master equation truncated at `n_max`,
/// evaluated as cumulative log-sums. The result carries its own truncation
/// flag via [`PhotonDistribution::is_truncated`].
pub fn steady_state_product<P: GainSource + ?Sized>(pump: &P, n_max: usize) -> PhotonDistribution {
    let kappa = pump.kappa();
    let mut log_p = Vec::with_capacity(n_max + 1);
    log_p.push(0.0);
    let mut acc = 0.0;
    for k in 1..=n_max {
        let ratio = pump.xi(k) / (kappa * k as f64);
        acc += if ratio > 0.0 { ratio.ln() } else { f64::NEG_INFINITY };
        log_p.push(acc);
    }
    let max = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_p.iter().map(|l| (l - max).exp()).collect();
    PhotonDistribution::from_weights(weights).expect("p(0) term keeps the sum positive")
}

/// Steady state with the cutoff doubled from [`DEFAULT_N_MAX`] until the
/// tail is below [`TRUNCATION_TOL`] or [`MAX_N_MAX`] is reached.
pub fn steady_state<P: GainSource + ?Sized>(pump: &P) -> Result<PhotonDistribution> {
    steady_state_from(pump, DEFAULT_N_MAX)
}

pub fn steady_state_from<P: GainSource + ?Sized>(pump: &P, n_start: usize) -> Result<PhotonDistribution> {
    let mut n_max = n_start.clamp(1, MAX_N_MAX);
    loop {
        let p = steady_state_product(pump, n_max);
        if !p.is_truncated() {
            return Ok(p);
        }
        if n_max >= MAX_N_MAX {
            return Err(Error::Truncated {
                n_max,
                tail: p.tail(),
            });
        }
        n_max = (2 * n_max).min(MAX_N_MAX);
    }
}

/// Slowest nonzero relaxation rate of the truncated master equation (1/s),
/// i.e. the spectral gap of the birth–death generator.
///
/// The generator is similar to a symmetric tridiagonal matrix; its second
/// eigenvalue is located by Sturm-sequence bisection.
pub fn relaxation_rate<P: GainSource + ?Sized>(pump: &P, n_max: usize) -> f64 {
    let gen = Generator::new(pump, n_max);
    let len = n_max + 1;
    let diag: Vec<f64> = (0..len)
        .map(|n| -(gen.birth[n] + gen.kappa * n as f64))
        .collect();
    let off_sq: Vec<f64> = (0..n_max)
        .map(|n| gen.birth[n] * gen.kappa * (n + 1) as f64)
        .collect();

    // number of eigenvalues strictly below x
    let count_below = |x: f64| -> usize {
        let mut count = 0;
        let mut d = diag[0] - x;
        if d < 0.0 {
            count += 1;
        }
        for i in 1..len {
            let prev = if d == 0.0 { f64::MIN_POSITIVE } else { d };
            d = diag[i] - x - off_sq[i - 1] / prev;
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };

    let lower = diag
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let left = if i > 0 { off_sq[i - 1].sqrt() } else { 0.0 };
            let right = if i < n_max { off_sq[i].sqrt() } else { 0.0 };
            d - left - right
        })
        .fold(0.0, f64::min);
    // bracket the second largest eigenvalue: len-1 eigenvalues lie below it
    let (mut lo, mut hi) = (lower, 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if count_below(mid) >= len - 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    -0.5 * (lo + hi)
}

/// Mean photon number `Σ n p(n)`.
pub fn mean_photon(p: &PhotonDistribution) -> f64 {
    p.probs
        .iter()
        .enumerate()
        .map(|(n, pn)| n as f64 * pn)
        .sum()
}

/// Output photon flux `κ⟨n⟩` (photons/s).
pub fn photon_flux(p: &PhotonDistribution, kappa: f64) -> f64 {
    kappa * mean_photon(p)
}

/// Linear-regime cavity output `ξ_1 = (⟨N⟩/τ) sin²(g τ)`.
pub fn linear_regime_output<P: GainSource + ?Sized>(pump: &P) -> f64 {
    pump.xi(1)
}

/// Small-angle form `(⟨N⟩/τ)(g τ)²` of [`linear_regime_output`].
pub fn linear_regime_output_quadratic(pump: &PumpParams) -> f64 {
    pump.injection_rate() * pump.rabi_angle().powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn random_dist(weights: Vec<f64>) -> PhotonDistribution {
        PhotonDistribution::from_weights(weights).unwrap()
    }

    #[test]
    fn gain_map_examples() {
        let vac = PhotonDistribution::vacuum(5);
        let p = gain_map(&vac, PI / 2.0, 1.0);
        assert!((p.probs()[1] - 1.0).abs() < 1e-15);
        assert!(p.probs()[0] < 1e-30);

        let q = PhotonDistribution::from_probs(vec![0.2, 0.3, 0.5, 0.0]).unwrap();
        assert_eq!(gain_map(&q, 0.0, 1.0), q);

        // |e,0> under H = g(σ+ a + a† σ-) for time τ: amplitude cos(gτ) stays,
        // -i sin(gτ) moves to |g,1>; with gτ = π/4 both populations are 1/2.
        let half = gain_map(&vac, PI / 4.0, 1.0);
        assert_relative_eq!(half.probs()[0], 0.5, max_relative = 1e-14);
        assert_relative_eq!(half.probs()[1], 0.5, max_relative = 1e-14);
    }

    #[test]
    fn gain_map_overflow_is_accumulated() {
        let top = PhotonDistribution::fock(3, 3);
        let g_tau = PI / 4.0; // sin²(2 · π/4) = 1
        let p = gain_map(&top, g_tau, 1.0);
        assert_eq!(p.probs()[3], 1.0);
        assert_relative_eq!(p.overflow(), 1.0, max_relative = 1e-14);
        assert!(p.is_truncated());
    }

    #[test]
    fn loss_rate_examples() {
        let kappa = 3.0;
        assert!(loss_rate(&PhotonDistribution::vacuum(4), kappa).iter().all(|r| *r == 0.0));
        let r = loss_rate(&PhotonDistribution::fock(1, 4), kappa);
        assert_eq!(r[0], kappa);
        assert_eq!(r[1], -kappa);
        assert!(r[2..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pure_decay_follows_exponential() {
        let kappa = 2.0e6;
        let pump = PumpParams::new(0.0, 1e-7, 1e6, kappa).unwrap();
        let p0 = PhotonDistribution::fock(1, 10);
        for &kt in &[0.1, 0.5, 1.0, 2.0, 4.0] {
            let p = evolve_guarded(&p0, &pump, kt / kappa).unwrap();
            assert_relative_eq!(p.mean(), (-kt).exp(), max_relative = 1e-6);
        }
    }

    #[test]
    fn trapping_state_keeps_vacuum() {
        let tau = 1e-7;
        let pump = PumpParams::new(2.0, tau, PI / tau, 1e6).unwrap();
        let p = evolve_guarded(&PhotonDistribution::vacuum(20), &pump, 5e-6).unwrap();
        assert!(p.mean() < 1e-20);
        let s = steady_state_product(&pump, 20);
        assert_eq!(s.probs()[0], 1.0);
    }

    #[test]
    fn evolve_rejects_large_step() {
        let pump = PumpParams::new(1.0, 1e-7, 1e6, 1e6).unwrap();
        let p0 = PhotonDistribution::vacuum(10);
        let guard = max_stable_step(&pump, 10);
        assert!(evolve(&p0, &pump, 1e-6, 2.0 * guard).is_err());
        assert!(evolve(&p0, &pump, 1e-6, guard).is_ok());
    }

    #[test]
    fn long_evolution_reaches_product_steady_state() {
        // Below threshold the relaxation rate is of order κ.
        let kappa = 1.0e6;
        let tau = 1.0e-7;
        let pump = PumpParams::new(0.8, tau, 0.6 / tau, kappa).unwrap();
        let exact = steady_state_product(&pump, 40);
        let p = evolve_guarded(&PhotonDistribution::vacuum(40), &pump, 40.0 / kappa).unwrap();
        assert!(exact.max_abs_diff(&p) < 1e-9, "diff {}", exact.max_abs_diff(&p));
    }

    #[test]
    fn steady_state_examples() {
        let no_pump = PumpParams::new(0.0, 1e-7, 1e6, 1e6).unwrap();
        assert_eq!(steady_state_product(&no_pump, 30).probs()[0], 1.0);

        // ⟨N⟩ = 1.5 with ξ1/κ = 0.5; compare against a direct product in
        // extended precision (i128 rationals are overkill; plain f64
        // multiplication of the unlogged ratios is an independent route).
        let tau = 1e-7;
        let g_tau: f64 = 0.7;
        let kappa = 1.5 / tau * g_tau.sin().powi(2) / 0.5;
        let pump = PumpParams::new(1.5, tau, g_tau / tau, kappa).unwrap();
        assert_relative_eq!(pump.xi(1) / kappa, 0.5, max_relative = 1e-14);
        let p = steady_state_product(&pump, 30);
        let mut direct = vec![1.0f64];
        for k in 1..=30 {
            let xi = 1.5 / tau * ((k as f64).sqrt() * g_tau).sin().powi(2);
            direct.push(direct[k - 1] * xi / (kappa * k as f64));
        }
        let z: f64 = direct.iter().sum();
        for (a, b) in p.probs().iter().zip(direct.iter()) {
            assert!((a - b / z).abs() < 1e-15);
        }
        assert_relative_eq!(p.probs()[1] / p.probs()[0], 0.5, max_relative = 1e-13);
    }

    #[test]
    fn steady_state_escalates_cutoff() {
        let tau = 1e-7;
        // ⟨n⟩ around 53: needs more than the default 40 photons
        let pump = PumpParams::new(3.0, tau, 0.1 / tau, 2.5e5).unwrap();
        let p = steady_state(&pump).unwrap();
        assert!(p.n_max() > DEFAULT_N_MAX);
        assert!(!p.is_truncated());

        let huge = PumpParams::new(3.0, tau, 0.01 / tau, 1e3).unwrap();
        assert!(matches!(steady_state(&huge), Err(Error::Truncated { .. })));
    }

    #[test]
    fn mean_and_flux_examples() {
        assert_eq!(mean_photon(&PhotonDistribution::vacuum(3)), 0.0);
        let half = PhotonDistribution::from_probs(vec![0.5, 0.5]).unwrap();
        assert_eq!(mean_photon(&half), 0.5);
        assert_eq!(photon_flux(&half, 4.0), 2.0);
    }

    #[test]
    fn linear_regime_examples() {
        let tau = 1e-7;
        let zero = PumpParams::new(0.1, tau, 0.0, 1e6).unwrap();
        assert_eq!(linear_regime_output(&zero), 0.0);

        let a = PumpParams::new(0.1, tau, 0.05 / tau, 1e7).unwrap();
        let b = PumpParams::new(0.05, tau, 0.05 / tau, 1e7).unwrap();
        assert_relative_eq!(linear_regime_output(&b), 0.5 * linear_regime_output(&a), max_relative = 1e-15);

        // gτ = 0.05, ⟨N⟩ = 0.1: κ⟨n⟩ from the full steady state vs ξ1
        let xi1 = linear_regime_output(&a);
        let flux = photon_flux(&steady_state_product(&a, 20), a.kappa());
        assert!((flux - xi1).abs() / xi1 < 0.01);
        assert!((linear_regime_output_quadratic(&a) - xi1).abs() / xi1 < 1e-3);
    }

    proptest! {
        #[test]
        fn gain_map_normalizes_and_never_lowers_mean(
            w in prop::collection::vec(0.0f64..1.0, 2..30),
            g_tau in 0.0f64..4.0,
        ) {
            prop_assume!(w.iter().sum::<f64>() > 1e-3);
            let mut w = w;
            w.push(0.0); // headroom so the map is exact
            let p = random_dist(w);
            let q = gain_map(&p, g_tau, 1.0);
            prop_assert!((q.total() - 1.0).abs() < 1e-12);
            let expected_gain: f64 = p.probs().iter().enumerate()
                .map(|(n, pn)| pn * (((n + 1) as f64).sqrt() * g_tau).sin().powi(2))
                .sum();
            let gain = q.mean() - p.mean();
            prop_assert!(gain >= -1e-12);
            prop_assert!((gain - expected_gain).abs() < 1e-10);
        }

        #[test]
        fn loss_preserves_trace(w in prop::collection::vec(0.0f64..1.0, 1..40), kappa in 1.0f64..1e7) {
            prop_assume!(w.iter().sum::<f64>() > 1e-3);
            let p = random_dist(w);
            let r = loss_rate(&p, kappa);
            // telescoping: Σ (n+1)p(n+1) - n p(n) = 0
            let s: f64 = r.iter().sum();
            prop_assert!(s.abs() <= 1e-12 * kappa * p.n_max().max(1) as f64);
        }

        #[test]
        fn mean_matches_direct_sum(w in prop::collection::vec(0.0f64..1.0, 1..40)) {
            prop_assume!(w.iter().sum::<f64>() > 1e-3);
            let total: f64 = w.iter().sum();
            let direct: f64 = w.iter().enumerate().map(|(n, x)| n as f64 * x).sum::<f64>() / total;
            let p = random_dist(w);
            prop_assert!((mean_photon(&p) - direct).abs() <= 1e-12 * direct.max(1.0));
        }

        #[test]
        fn steady_state_depends_only_on_rate_over_kappa(
            g_tau in 0.05f64..2.5,
            n_atoms in 0.1f64..3.0,
            c in 0.1f64..10.0,
        ) {
            let tau = 1e-7;
            let kappa = 2e6;
            let a = PumpParams::new(n_atoms, tau, g_tau / tau, kappa).unwrap();
            // scale ⟨N⟩/τ and κ by c, keeping gτ fixed
            let b = PumpParams::new(c * n_atoms, tau, g_tau / tau, c * kappa).unwrap();
            let pa = steady_state_product(&a, 60);
            let pb = steady_state_product(&b, 60);
            prop_assert!(pa.max_abs_diff(&pb) < 1e-12);
        }

        #[test]
        fn linear_regime_single_photon_law(g_tau in 0.001f64..0.1, ratio in 1e-5f64..0.01) {
            let tau = 1e-7;
            let n_atoms = 0.05;
            let kappa = n_atoms / tau * g_tau.sin().powi(2) / ratio;
            let pump = PumpParams::new(n_atoms, tau, g_tau / tau, kappa).unwrap();
            let p = steady_state_product(&pump, 20);
            let x = pump.xi(1) / kappa;
            let p1 = p.probs()[1];
            prop_assert!((p1 - x / (1.0 + x)).abs() < 1e-4 * p1);
            let rest: f64 = p.probs()[2..].iter().sum();
            // p(2)/p(1) = ξ2/(2κ) ≈ ξ1/κ, so the multi-photon weight is
            // bounded by x/(1-x) p(1), and by 1e-3 p(1) only once x < 1e-3
            prop_assert!(rest <= x / (1.0 - x) * p1);
            if x < 1e-3 {
                prop_assert!(rest < 1e-3 * p1);
            }
        }
    }
}
