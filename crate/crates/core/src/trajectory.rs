//! Monte Carlo wavefunction trajectories of the cavity field with
//! Poissonian atom arrivals, as an independent check of the master equation.
//!
//! The state lives in field ⊗ (active atoms). Basis index
//! `n · 2^a + bits`, where bit `j` set means atom `j` is excited. Between
//! events the state follows
//!
//! ```text
//! dψ/dt = −i H_eff ψ,   H_eff = Σ_j g_j (a σ_j⁺ + a† σ_j⁻) − i κ/2 a†a
//! ```
//!
//! with cavity jumps `ψ → a ψ` placed by the waiting-time algorithm. An
//! atom leaving the mode is measured in the {e, g} basis and dropped.

use std::collections::VecDeque;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::ensemble::{AveragedPump, PositionSpreadKernel, PumpBase};
use crate::error::{Error, Result};
use crate::kinetics::{self, GainChannel, GainSource, PhotonDistribution};
use crate::physics::AperturePosition;

pub const DEFAULT_A_MAX: usize = 4;
pub const DEFAULT_N_MAX: usize = 40;
pub const DEFAULT_CHECKPOINTS: usize = 10;
/// Tolerance on norm² when locating a jump inside a step.
pub const JUMP_NORM_TOL: f64 = 1e-10;
/// Margin below which the multi-atom condition counts as satisfied.
pub const MULTI_ATOM_THRESHOLD: f64 = 0.3;
/// Fraction of queued arrivals above which an ensemble is unreliable.
pub const OVERFLOW_LIMIT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum InitialField {
    Vacuum,
    Fock(usize),
    /// Fock state drawn per trajectory from this distribution.
    Sampled(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryConfig {
    pub trajectories: usize,
    /// Total simulated time (s).
    pub t_final: f64,
    pub seed: u64,
    pub a_max: usize,
    pub n_max: usize,
    /// Largest Runge–Kutta step while atoms are present (s). `None` uses
    /// τ̄/32.
    pub dt: Option<f64>,
    /// Times at which ⟨n⟩ is recorded. Empty means ten evenly spaced
    /// times ending at `t_final`.
    pub checkpoints: Vec<f64>,
    pub initial: InitialField,
    /// Keep every cavity-jump time.
    pub record_jumps: bool,
}

impl TrajectoryConfig {
    pub fn new(trajectories: usize, t_final: f64, seed: u64) -> Self {
        TrajectoryConfig {
            trajectories,
            t_final,
            seed,
            a_max: DEFAULT_A_MAX,
            n_max: DEFAULT_N_MAX,
            dt: None,
            checkpoints: Vec::new(),
            initial: InitialField::Vacuum,
            record_jumps: false,
        }
    }

    pub fn checkpoint_times(&self) -> Vec<f64> {
        if self.checkpoints.is_empty() {
            (1..=DEFAULT_CHECKPOINTS)
                .map(|i| self.t_final * i as f64 / DEFAULT_CHECKPOINTS as f64)
                .collect()
        } else {
            self.checkpoints.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.trajectories == 0 {
            return Err(Error::invalid("trajectories", "need at least one"));
        }
        if self.a_max == 0 {
            return Err(Error::invalid("a_max", "need at least one atom slot"));
        }
        if self.a_max > 16 {
            return Err(Error::invalid("a_max", "at most 16 simultaneous atoms"));
        }
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return Err(Error::invalid("t_final", format!("must be > 0, got {}", self.t_final)));
        }
        if let Some(dt) = self.dt {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
            }
        }
        let cps = self.checkpoint_times();
        if cps.iter().any(|&t| !(t >= 0.0 && t <= self.t_final)) || cps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("checkpoints", "must be sorted and lie in [0, t_final]"));
        }
        match &self.initial {
            InitialField::Fock(n) if *n > self.n_max => {
                Err(Error::invalid("initial", "Fock state above n_max"))
            }
            InitialField::Sampled(p) if p.len() > self.n_max + 1 || p.iter().any(|v| !(*v >= 0.0)) => {
                Err(Error::invalid("initial", "distribution must be nonnegative and fit below n_max"))
            }
            _ => Ok(()),
        }
    }
}

/// Event counts of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct JumpSummary {
    pub cavity_jumps: u64,
    pub arrivals: u64,
    /// Arrivals that found `a_max` atoms present and were queued.
    pub queued: u64,
    pub exits_excited: u64,
    pub exits_ground: u64,
}

impl JumpSummary {
    fn add(&mut self, o: &JumpSummary) {
        self.cavity_jumps += o.cavity_jumps;
        self.arrivals += o.arrivals;
        self.queued += o.queued;
        self.exits_excited += o.exits_excited;
        self.exits_ground += o.exits_ground;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryEnsemble {
    pub times: Vec<f64>,
    /// `per_trajectory[k][i]`: ⟨n⟩ of trajectory `k` at checkpoint `i`.
    pub per_trajectory: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Sample standard deviation over √(trajectories).
    pub stderr: Vec<f64>,
    pub jumps: JumpSummary,
    pub per_trajectory_jumps: Vec<JumpSummary>,
    pub jump_times: Option<Vec<Vec<f64>>>,
    /// Largest population seen in the top Fock state at a checkpoint.
    pub max_top_population: f64,
    /// Steps where the norm grew or the excitation bound was exceeded.
    pub invariant_violations: u64,
    pub unreliable: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
struct Atom {
    g: f64,
    exit: f64,
}

struct Channels {
    list: Vec<GainChannel>,
    cumulative: Vec<f64>,
}

impl Channels {
    fn new(list: Vec<GainChannel>) -> Self {
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = list
            .iter()
            .map(|c| {
                acc += c.weight;
                acc
            })
            .collect();
        cumulative.iter_mut().for_each(|c| *c /= acc);
        Channels { list, cumulative }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> GainChannel {
        let u: f64 = rng.random();
        let i = self.cumulative.partition_point(|&c| c <= u).min(self.list.len() - 1);
        self.list[i]
    }
}

struct Trajectory<'a> {
    rng: ChaCha8Rng,
    channels: &'a Channels,
    rate: f64,
    kappa: f64,
    n_max: usize,
    a_max: usize,
    dt: f64,
    psi: Vec<Complex64>,
    atoms: Vec<Atom>,
    queue: VecDeque<GainChannel>,
    t: f64,
    threshold: f64,
    next_arrival: f64,
    summary: JumpSummary,
    jump_times: Option<Vec<f64>>,
    excitation_bound: usize,
    violations: u64,
    scratch: [Vec<Complex64>; 5],
}

fn norm_sqr(psi: &[Complex64]) -> f64 {
    psi.iter().map(|c| c.norm_sqr()).sum()
}

impl<'a> Trajectory<'a> {
    fn new(cfg: &TrajectoryConfig, index: u64, channels: &'a Channels, rate: f64, kappa: f64, dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index);
        let n0 = match &cfg.initial {
            InitialField::Vacuum => 0,
            InitialField::Fock(n) => *n,
            InitialField::Sampled(p) => {
                let total: f64 = p.iter().sum();
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                p.iter()
                    .position(|v| {
                        acc += v;
                        acc > u
                    })
                    .unwrap_or(p.len() - 1)
            }
        };
        let mut psi = vec![Complex64::new(0.0, 0.0); cfg.n_max + 1];
        psi[n0] = Complex64::new(1.0, 0.0);
        let threshold = rng.random::<f64>();
        let mut tr = Trajectory {
            rng,
            channels,
            rate,
            kappa,
            n_max: cfg.n_max,
            a_max: cfg.a_max,
            dt,
            psi,
            atoms: Vec::new(),
            queue: VecDeque::new(),
            t: 0.0,
            threshold,
            next_arrival: f64::INFINITY,
            summary: JumpSummary::default(),
            jump_times: cfg.record_jumps.then(Vec::new),
            excitation_bound: n0,
            violations: 0,
            scratch: Default::default(),
        };
        tr.next_arrival = tr.draw_arrival(0.0);
        tr
    }

    fn draw_arrival(&mut self, from: f64) -> f64 {
        if self.rate > 0.0 {
            from + Exp::new(self.rate).expect("positive rate").sample(&mut self.rng)
        } else {
            f64::INFINITY
        }
    }

    fn bits(&self) -> usize {
        self.atoms.len()
    }

    fn mean_photons(&self) -> f64 {
        let a = self.bits();
        let norm = norm_sqr(&self.psi);
        self.psi
            .iter()
            .enumerate()
            .map(|(i, c)| (i >> a) as f64 * c.norm_sqr())
            .sum::<f64>()
            / norm
    }

    fn top_population(&self) -> f64 {
        let a = self.bits();
        let norm = norm_sqr(&self.psi);
        self.psi[(self.n_max << a)..].iter().map(|c| c.norm_sqr()).sum::<f64>() / norm
    }

    /// `out = −i H_eff psi`.
    fn derivative(atoms: &[Atom], kappa: f64, n_max: usize, psi: &[Complex64], out: &mut [Complex64]) {
        let a = atoms.len();
        let mask = (1usize << a) - 1;
        for (idx, o) in out.iter_mut().enumerate() {
            *o = psi[idx] * (-0.5 * kappa * (idx >> a) as f64);
        }
        for (idx, &c) in psi.iter().enumerate() {
            if c == Complex64::new(0.0, 0.0) {
                continue;
            }
            let n = idx >> a;
            let bits = idx & mask;
            for (j, atom) in atoms.iter().enumerate() {
                let bit = 1usize << j;
                if bits & bit == 0 {
                    // a σ⁺: |n, g⟩ → √n |n−1, e⟩
                    if n > 0 {
                        let target = ((n - 1) << a) | bits | bit;
                        out[target] += c * Complex64::new(0.0, -atom.g * (n as f64).sqrt());
                    }
                } else if n < n_max {
                    // a† σ⁻: |n, e⟩ → √(n+1) |n+1, g⟩
                    let target = ((n + 1) << a) | (bits & !bit);
                    out[target] += c * Complex64::new(0.0, -atom.g * ((n + 1) as f64).sqrt());
                }
            }
        }
    }

    /// One classical RK4 step of length `h` from `start` into `out`.
    fn rk4(&mut self, start: &[Complex64], h: f64, out: &mut Vec<Complex64>) {
        let d = start.len();
        let [k1, k2, k3, k4, tmp] = &mut self.scratch;
        for v in [&mut *k1, &mut *k2, &mut *k3, &mut *k4, &mut *tmp] {
            v.resize(d, Complex64::new(0.0, 0.0));
        }
        Self::derivative(&self.atoms, self.kappa, self.n_max, start, k1);
        for i in 0..d {
            tmp[i] = start[i] + k1[i] * (0.5 * h);
        }
        Self::derivative(&self.atoms, self.kappa, self.n_max, tmp, k2);
        for i in 0..d {
            tmp[i] = start[i] + k2[i] * (0.5 * h);
        }
        Self::derivative(&self.atoms, self.kappa, self.n_max, tmp, k3);
        for i in 0..d {
            tmp[i] = start[i] + k3[i] * h;
        }
        Self::derivative(&self.atoms, self.kappa, self.n_max, tmp, k4);
        out.resize(d, Complex64::new(0.0, 0.0));
        for i in 0..d {
            out[i] = start[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0);
        }
    }

    fn cavity_jump(&mut self) {
        let a = self.bits();
        let len = self.psi.len();
        let mut next = vec![Complex64::new(0.0, 0.0); len];
        for idx in (1 << a)..len {
            let n = idx >> a;
            next[idx - (1 << a)] = self.psi[idx] * (n as f64).sqrt();
        }
        let norm = norm_sqr(&next).sqrt();
        next.iter_mut().for_each(|c| *c /= norm);
        self.psi = next;
        self.threshold = self.rng.random::<f64>();
        self.summary.cavity_jumps += 1;
        self.excitation_bound = self.excitation_bound.saturating_sub(1);
        if let Some(log) = self.jump_times.as_mut() {
            log.push(self.t);
        }
    }

    /// Advance to `t_end` without atoms: amplitudes decay as `e^{−κnt/2}`.
    fn decay_free(&mut self, t_end: f64) {
        while self.t < t_end {
            let span = t_end - self.t;
            let start = self.psi.clone();
            let norm_at = |s: f64| -> f64 {
                start
                    .iter()
                    .enumerate()
                    .map(|(n, c)| c.norm_sqr() * (-self.kappa * n as f64 * s).exp())
                    .sum()
            };
            if norm_at(span) > self.threshold {
                self.apply_free(&start, span);
                self.t = t_end;
                return;
            }
            let (mut lo, mut hi) = (0.0, span);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let f = norm_at(mid) - self.threshold;
                if f > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if f.abs() <= JUMP_NORM_TOL || hi - lo <= 1e-15 * span {
                    break;
                }
            }
            let s = 0.5 * (lo + hi);
            self.apply_free(&start, s);
            self.t += s;
            self.cavity_jump();
        }
    }

    fn apply_free(&mut self, start: &[Complex64], s: f64) {
        for (n, (c, c0)) in self.psi.iter_mut().zip(start).enumerate() {
            *c = c0 * (-0.5 * self.kappa * n as f64 * s).exp();
        }
    }

    /// Advance to `t_end` with atoms present.
    fn evolve_coupled(&mut self, t_end: f64) {
        let mut next = Vec::new();
        while self.t < t_end {
            let h = self.dt.min(t_end - self.t);
            let start = self.psi.clone();
            let before = norm_sqr(&start);
            self.rk4(&start, h, &mut next);
            let after = norm_sqr(&next);
            if after > before * (1.0 + 1e-12) {
                self.violations += 1;
            }
            if after > self.threshold {
                std::mem::swap(&mut self.psi, &mut next);
                self.t = if t_end - self.t <= h { t_end } else { self.t + h };
                continue;
            }
            // locate the jump inside this step
            let (mut lo, mut hi) = (0.0, h);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                self.rk4(&start, mid, &mut next);
                let f = norm_sqr(&next) - self.threshold;
                if f > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if f.abs() <= JUMP_NORM_TOL || hi - lo <= 1e-15 * h {
                    break;
                }
            }
            let s = 0.5 * (lo + hi);
            self.rk4(&start, s, &mut next);
            std::mem::swap(&mut self.psi, &mut next);
            self.t += s;
            self.cavity_jump();
        }
    }

    fn advance(&mut self, t_end: f64) {
        if self.atoms.is_empty() {
            self.decay_free(t_end);
        } else {
            self.evolve_coupled(t_end);
        }
    }

    /// Rescale the jump threshold and renormalize the state.
    fn renormalize(&mut self) {
        let norm = norm_sqr(&self.psi);
        self.threshold /= norm;
        let s = norm.sqrt();
        self.psi.iter_mut().for_each(|c| *c /= s);
    }

    fn admit(&mut self, channel: GainChannel) {
        self.renormalize();
        let a = self.bits();
        let len = self.psi.len();
        let mut next = vec![Complex64::new(0.0, 0.0); 2 * len];
        for idx in 0..len {
            let n = idx >> a;
            let bits = idx & ((1 << a) - 1);
            next[(n << (a + 1)) | bits | (1 << a)] = self.psi[idx];
        }
        self.psi = next;
        self.atoms.push(Atom {
            g: channel.g,
            exit: self.t + channel.tau,
        });
        self.excitation_bound += 1;
    }

    fn arrive(&mut self) {
        self.summary.arrivals += 1;
        let channel = self.channels.draw(&mut self.rng);
        if self.atoms.len() < self.a_max {
            self.admit(channel);
        } else {
            self.summary.queued += 1;
            self.queue.push_back(channel);
        }
        self.next_arrival = self.draw_arrival(self.t);
    }

    fn exit(&mut self, j: usize) {
        self.renormalize();
        let a = self.bits();
        let bit = 1usize << j;
        let p_excited: f64 = self
            .psi
            .iter()
            .enumerate()
            .filter(|(i, _)| i & bit != 0)
            .map(|(_, c)| c.norm_sqr())
            .sum();
        let excited = self.rng.random::<f64>() < p_excited;
        let keep = if excited { bit } else { 0 };
        let mut next = vec![Complex64::new(0.0, 0.0); self.psi.len() / 2];
        for (idx, &c) in self.psi.iter().enumerate() {
            if idx & bit != keep {
                continue;
            }
            let n = idx >> a;
            let bits = idx & ((1 << a) - 1);
            let low = bits & (bit - 1);
            let high = (bits >> (j + 1)) << j;
            next[(n << (a - 1)) | high | low] = c;
        }
        let norm = norm_sqr(&next).sqrt();
        if norm > 0.0 {
            next.iter_mut().for_each(|c| *c /= norm);
        }
        self.psi = next;
        self.atoms.remove(j);
        if excited {
            self.summary.exits_excited += 1;
            self.excitation_bound = self.excitation_bound.saturating_sub(1);
        } else {
            self.summary.exits_ground += 1;
        }
        if let Some(channel) = self.queue.pop_front() {
            self.admit(channel);
        }
    }

    fn check_excitation(&mut self) {
        let a = self.bits();
        let max = self
            .psi
            .iter()
            .enumerate()
            .filter(|(_, c)| c.norm_sqr() > 0.0)
            .map(|(i, _)| (i >> a) + (i & ((1 << a) - 1)).count_ones() as usize)
            .max()
            .unwrap_or(0);
        if max > self.excitation_bound {
            self.violations += 1;
        }
    }

    fn run(mut self, checkpoints: &[f64], t_final: f64) -> (Vec<f64>, f64, JumpSummary, Option<Vec<f64>>, u64) {
        let mut record = Vec::with_capacity(checkpoints.len());
        let mut top: f64 = 0.0;
        let mut next_cp = 0;
        loop {
            while next_cp < checkpoints.len() && checkpoints[next_cp] <= self.t {
                record.push(self.mean_photons());
                top = top.max(self.top_population());
                next_cp += 1;
            }
            if self.t >= t_final {
                break;
            }
            let next_exit = self
                .atoms
                .iter()
                .map(|a| a.exit)
                .fold(f64::INFINITY, f64::min);
            let next_check = checkpoints.get(next_cp).copied().unwrap_or(f64::INFINITY);
            let t_event = self.next_arrival.min(next_exit).min(next_check).min(t_final);
            self.advance(t_event);
            self.t = t_event;
            if let Some(j) = self.atoms.iter().position(|a| a.exit <= t_event) {
                self.exit(j);
                self.check_excitation();
            } else if self.next_arrival <= t_event {
                self.arrive();
                self.check_excitation();
            }
        }
        (record, top, self.summary, self.jump_times, self.violations)
    }
}

fn channels_for(base: &PumpBase, pos: AperturePosition, kernel: &PositionSpreadKernel) -> Result<(Channels, f64)> {
    let pump = AveragedPump::new(base, pos, kernel)?;
    let rate = pump.injection_rate();
    Ok((Channels::new(pump.channels().to_vec()), rate))
}

/// Run the ensemble. Atom couplings and transit times are drawn from the
/// same (velocity node, kernel offset) classes that define the averaged
/// gain; trajectory `k` uses stream `k` of the seeded generator.
pub fn run_trajectories(
    base: &PumpBase,
    pos: AperturePosition,
    kernel: &PositionSpreadKernel,
    cfg: &TrajectoryConfig,
) -> Result<TrajectoryEnsemble> {
    cfg.validate()?;
    let (channels, rate) = channels_for(base, pos, kernel)?;
    let dt = cfg.dt.unwrap_or(base.mean_tau() / 32.0);
    let times = cfg.checkpoint_times();

    let mut per_trajectory = Vec::with_capacity(cfg.trajectories);
    let mut per_jumps = Vec::with_capacity(cfg.trajectories);
    let mut jump_times = cfg.record_jumps.then(Vec::new);
    let mut total = JumpSummary::default();
    let mut top: f64 = 0.0;
    let mut violations = 0;
    for k in 0..cfg.trajectories {
        let tr = Trajectory::new(cfg, k as u64, &channels, rate, base.params.kappa, dt);
        let (rec, t, summary, jumps, v) = tr.run(&times, cfg.t_final);
        per_trajectory.push(rec);
        total.add(&summary);
        per_jumps.push(summary);
        top = top.max(t);
        violations += v;
        if let (Some(all), Some(j)) = (jump_times.as_mut(), jumps) {
            all.push(j);
        }
    }

    let m = cfg.trajectories as f64;
    let mean: Vec<f64> = (0..times.len())
        .map(|i| per_trajectory.iter().map(|r| r[i]).sum::<f64>() / m)
        .collect();
    let stderr = (0..times.len())
        .map(|i| {
            if cfg.trajectories < 2 {
                return 0.0;
            }
            let var = per_trajectory.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / (m - 1.0);
            (var / m).sqrt()
        })
        .collect();

    let mut warnings = Vec::new();
    let overflow = if total.arrivals > 0 {
        total.queued as f64 / total.arrivals as f64
    } else {
        0.0
    };
    if total.queued > 0 {
        warnings.push(format!(
            "{} of {} arrivals found {} atoms present and were queued",
            total.queued, total.arrivals, cfg.a_max
        ));
    }
    let unreliable = overflow > OVERFLOW_LIMIT;
    if top > 1e-6 {
        warnings.push(format!("population {top:e} reached the top Fock state n = {}", cfg.n_max));
    }
    if violations > 0 {
        warnings.push(format!("{violations} invariant violations"));
    }
    Ok(TrajectoryEnsemble {
        times,
        per_trajectory,
        mean,
        stderr,
        jumps: total,
        per_trajectory_jumps: per_jumps,
        jump_times,
        max_top_population: top,
        invariant_violations: violations,
        unreliable,
        warnings,
    })
}

/// `g τ / (π √(⟨n⟩ + 1))`; at most [`MULTI_ATOM_THRESHOLD`] counts as
/// satisfied.
pub fn multi_atom_condition(g: f64, tau: f64, mean_photons: f64) -> f64 {
    g.abs() * tau / (std::f64::consts::PI * (mean_photons + 1.0).sqrt())
}

/// Master-equation ⟨n⟩ at the given times, evolved from `initial`.
pub fn master_checkpoints<P: GainSource + ?Sized>(
    pump: &P,
    initial: &PhotonDistribution,
    times: &[f64],
) -> Result<Vec<f64>> {
    let mut p = initial.clone();
    let mut t = 0.0;
    times
        .iter()
        .map(|&tk| {
            if tk > t {
                p = kinetics::evolve_guarded(&p, pump, tk - t)?;
                t = tk;
            }
            Ok(p.mean())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub times: Vec<f64>,
    pub trajectory_mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub master_mean: Vec<f64>,
    pub z: Vec<f64>,
    pub max_abs_z: f64,
    pub pass: bool,
}

/// z-score per checkpoint; passes iff every `|z| <= 3`.
pub fn compare_with_master(ensemble: &TrajectoryEnsemble, master: &[f64]) -> Comparison {
    let z: Vec<f64> = ensemble
        .mean
        .iter()
        .zip(&ensemble.stderr)
        .zip(master)
        .map(|((m, se), x)| {
            let d = m - x;
            if d == 0.0 {
                0.0
            } else if *se > 0.0 {
                d / se
            } else {
                f64::INFINITY.copysign(d)
            }
        })
        .collect();
    let max_abs_z = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Comparison {
        times: ensemble.times.clone(),
        trajectory_mean: ensemble.mean.clone(),
        stderr: ensemble.stderr.clone(),
        master_mean: master.to_vec(),
        z,
        max_abs_z,
        pass: max_abs_z <= 3.0 && master.len() == ensemble.mean.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::VelocityDistribution;
    use crate::physics::PhysicalParams;

    fn params() -> PhysicalParams {
        PhysicalParams {
            wavelength: 791.1e-9,
            waist: 20e-6,
            kappa: 1.885e6,
            dipole: 2.086e-29,
            e_vac0: 86.0,
            gamma: 3.1e5,
            rho_ee0: 0.86,
        }
    }

    fn base(mean_atoms: f64) -> PumpBase {
        PumpBase::new(params(), mean_atoms, VelocityDistribution::delta(670.0).unwrap()).unwrap()
    }

    fn delta() -> PositionSpreadKernel {
        PositionSpreadKernel::delta(5e-9)
    }

    #[test]
    fn pure_decay_matches_exponential() {
        let kappa = params().kappa;
        let mut cfg = TrajectoryConfig::new(10_000, 3.0 / kappa, 11);
        cfg.initial = InitialField::Fock(1);
        cfg.n_max = 3;
        let ens = run_trajectories(&base(0.0), AperturePosition::default(), &delta(), &cfg).unwrap();
        for ((t, m), se) in ens.times.iter().zip(&ens.mean).zip(&ens.stderr) {
            let exact = (-kappa * t).exp();
            assert!((m - exact).abs() <= 3.0 * se, "t={t:e} {m} vs {exact} (se {se})");
        }
        assert_eq!(ens.jumps.arrivals, 0);
    }

    #[test]
    fn trapping_state_never_jumps() {
        // gτ = π with a negligible cavity decay during the transit
        let mut p = params();
        let tau = crate::physics::interaction_time(670.0, &p).unwrap();
        p.kappa = 1e-9 / tau;
        p.e_vac0 = std::f64::consts::PI / tau * crate::physics::HBAR / p.dipole;
        let b = PumpBase::new(p, 0.05, VelocityDistribution::delta(670.0).unwrap()).unwrap();
        let mut cfg = TrajectoryConfig::new(200, 400.0 * tau, 3);
        cfg.n_max = 4;
        // overlapping transits would break the trapping condition
        cfg.a_max = 1;
        let ens = run_trajectories(&b, AperturePosition::default(), &delta(), &cfg).unwrap();
        assert!(ens.jumps.arrivals > 0);
        assert_eq!(ens.jumps.cavity_jumps, 0);
        assert_eq!(ens.jumps.exits_ground, 0);
        assert_eq!(ens.invariant_violations, 0);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let kappa = params().kappa;
        let mut cfg = TrajectoryConfig::new(20, 2.0 / kappa, 99);
        cfg.record_jumps = true;
        cfg.n_max = 20;
        let a = run_trajectories(&base(1.5), AperturePosition::default(), &delta(), &cfg).unwrap();
        let b = run_trajectories(&base(1.5), AperturePosition::default(), &delta(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.jumps.cavity_jumps > 0);
        let c = run_trajectories(&base(1.5), AperturePosition::default(), &delta(), &TrajectoryConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a.jump_times, c.jump_times);
    }

    #[test]
    fn invariants_hold_with_overlapping_atoms() {
        let kappa = params().kappa;
        let mut cfg = TrajectoryConfig::new(30, 2.0 / kappa, 5);
        cfg.n_max = 25;
        cfg.a_max = 6;
        let ens = run_trajectories(&base(1.5), AperturePosition::default(), &delta(), &cfg).unwrap();
        assert_eq!(ens.invariant_violations, 0);
        assert!(ens.jumps.arrivals > 0);
        let exits = ens.jumps.exits_excited + ens.jumps.exits_ground;
        assert!(exits <= ens.jumps.arrivals);
    }

    #[test]
    fn stderr_definition() {
        let kappa = params().kappa;
        let mut cfg = TrajectoryConfig::new(50, 1.0 / kappa, 1);
        cfg.n_max = 20;
        let ens = run_trajectories(&base(0.5), AperturePosition::default(), &delta(), &cfg).unwrap();
        let i = ens.times.len() - 1;
        let m = ens.mean[i];
        let var = ens.per_trajectory.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / 49.0;
        assert!((ens.stderr[i] - (var / 50.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_atom_limit_matches_master() {
        // low rate, small coupling: transits rarely overlap
        let p = params().with_e_vac0(30.0);
        let b = PumpBase::new(p, 0.1, VelocityDistribution::delta(670.0).unwrap()).unwrap();
        let pos = AperturePosition::default();
        let kappa = p.kappa;
        let mut cfg = TrajectoryConfig::new(2000, 4.0 / kappa, 21);
        cfg.n_max = 10;
        cfg.a_max = 1;
        let ens = run_trajectories(&b, pos, &delta(), &cfg).unwrap();
        let pump = AveragedPump::new(&b, pos, &delta()).unwrap();
        let master = master_checkpoints(&pump, &PhotonDistribution::vacuum(cfg.n_max), &ens.times).unwrap();
        let report = compare_with_master(&ens, &master);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn multi_atom_condition_examples() {
        assert_eq!(multi_atom_condition(0.0, 1e-7, 3.0), 0.0);
        let tau = 5e-8;
        let g = std::f64::consts::PI / tau;
        assert!((multi_atom_condition(g, tau, 0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn comparison_examples() {
        let ens = TrajectoryEnsemble {
            times: vec![1.0, 2.0],
            per_trajectory: vec![],
            mean: vec![1.0, 2.0],
            stderr: vec![0.1, 0.1],
            jumps: JumpSummary::default(),
            per_trajectory_jumps: vec![],
            jump_times: None,
            max_top_population: 0.0,
            invariant_violations: 0,
            unreliable: false,
            warnings: vec![],
        };
        let same = compare_with_master(&ens, &[1.0, 2.0]);
        assert!(same.pass && same.z.iter().all(|z| *z == 0.0));
        let shifted = compare_with_master(&ens, &[1.0 + 1.0, 2.0]);
        assert!(!shifted.pass);
    }
}
