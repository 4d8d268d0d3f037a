//! The acceptance suite: eight end-to-end criteria, each returning a
//! pass/fail line with the measured figure next to its pinned tolerance.

use std::path::Path;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{BeamSection, KernelSection, PhysicsSection, Scenario, ScanSection};
use crate::deconv::{blur, RichardsonLucy, SignalSeries, DEFAULT_EPSILON, DEFAULT_ITERATIONS};
use crate::ensemble::{build_spread_kernel, AveragedPump, PositionSpreadKernel, PumpBase, VelocityDistribution};
use crate::error::Result;
use crate::fit::{self, chi_square, optimal_scale, FitPoint, FitProblem};
use crate::io::{fmt_f64, Table};
use crate::kinetics::{self, evolve_guarded, gain_map, linear_regime_output, loss_rate, photon_flux, steady_state_product, PhotonDistribution, PumpParams};
use crate::physics::{interaction_time, AperturePosition, HBAR, V_PER_CM_TO_V_PER_M};
use crate::pipeline::{cmd_fit, FitOptions, FitOutput};
use crate::scan::{background_flux, node_to_antinode_positions, relative_intensity, simulate_scan, NoiseModel, ScanConfig};
use crate::trajectory::{compare_with_master, master_checkpoints, multi_atom_condition, run_trajectories, InitialField, TrajectoryConfig, MULTI_ATOM_THRESHOLD};

/// Every threshold the suite compares against.
pub mod tolerances {
    /// Criterion 1: ‖p_product − p_evolved(30/κ)‖∞.
    pub const STEADY_EQUIVALENCE: f64 = 1e-7;
    /// Criterion 2: |κ⟨n⟩ − ξ₁| / ξ₁ and the cos² residual relative to the peak.
    pub const LINEAR_LAW: f64 = 0.01;
    /// Criterion 3: relative parameter recovery.
    pub const ROUND_TRIP: f64 = 0.005;
    /// Criterion 4: allowed ratio between replica spread and quoted σ.
    pub const SPREAD_FACTOR: f64 = 2.0;
    /// Criterion 5: max relative error on points with u ≥ 0.2.
    pub const DECONV_ERROR: f64 = 0.05;
    /// Criterion 5: flux conservation at every iteration.
    pub const DECONV_FLUX: f64 = 1e-3;
    /// Criterion 6: checkpoint |z|.
    pub const TRAJECTORY_Z: f64 = 3.0;
    /// Criterion 7: background over antinode signal.
    pub const BACKGROUND_RATIO: f64 = 1e-3;
    /// Criterion 8: random cases per invariant.
    pub const PROPERTY_CASES: u32 = 100;
}

/// Values quoted for the N₃ and N₂ data sets: ⟨N⟩, E_vac(0) (V/cm), 𝒮
/// (kcps) and their 1σ.
pub mod reference {
    pub const N3_MEAN_ATOMS: f64 = 1.5;
    pub const N3_E_VAC0_V_PER_CM: f64 = 0.86;
    pub const N3_SCALE_KCPS: f64 = 270.0;
    pub const N3_SIGMA_MEAN_ATOMS: f64 = 0.3;
    pub const N3_SIGMA_E_VAC0_V_PER_CM: f64 = 0.08;
    pub const N3_SIGMA_SCALE_KCPS: f64 = 49.0;
    pub const N2_MEAN_ATOMS: f64 = 1.1;
    pub const N2_E_VAC0_V_PER_CM: f64 = 0.88;
}

pub const CRITERIA: [(u8, &str); 8] = [
    (1, "steady-state equivalence: product vs evolved"),
    (2, "linear-regime law and cos² scan"),
    (3, "noiseless calibration round trip"),
    (4, "replica spread vs quoted uncertainties"),
    (5, "deconvolution round trip"),
    (6, "trajectories vs master equation"),
    (7, "background negligibility"),
    (8, "invariant property suites"),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {} [{}] {} ({:.1} s): {}",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

/// Run one criterion. `work_dir` receives the intermediate files of the
/// criteria that go through the command layer.
pub fn run_criterion(id: u8, work_dir: &Path) -> Result<CriterionResult> {
    let name = CRITERIA
        .iter()
        .find(|(i, _)| *i == id)
        .map(|(_, n)| n.to_string())
        .ok_or_else(|| crate::Error::Config(format!("no acceptance criterion {id}")))?;
    let t0 = Instant::now();
    let (pass, detail) = match id {
        1 => criterion_1()?,
        2 => criterion_2()?,
        3 => criterion_3(work_dir)?,
        4 => criterion_4()?,
        5 => criterion_5()?,
        6 => criterion_6()?,
        7 => criterion_7()?,
        _ => criterion_8()?,
    };
    Ok(CriterionResult {
        id,
        name,
        pass,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Scenario of the N₃ data set with the nonlinear-regime beam. κ, μ, w₀
/// and the velocity distribution are not quoted anywhere and are chosen so
/// that g₀τ̄ ≈ 0.9 and κτ̄ ≈ 0.1.
pub fn reference_scenario() -> Scenario {
    Scenario {
        physics: PhysicsSection {
            wavelength_nm: 791.1,
            waist_um: 20.0,
            kappa_per_s: 1.885e6,
            dipole_c_m: 2.086e-29,
            e_vac0_v_per_cm: reference::N3_E_VAC0_V_PER_CM,
            gamma_per_s: 3.1e5,
            rho_ee0: 0.86,
        },
        beam: BeamSection {
            mean_atoms: Some(reference::N3_MEAN_ATOMS),
            total_atoms: None,
            velocity_mean_m_per_s: 670.0,
            velocity_spread_m_per_s: 67.0,
            velocity_nodes: 9,
            velocity_table: None,
        },
        kernel: Some(KernelSection {
            hole_diameter_nm: 170.0,
            divergence_mrad: 0.24,
            standoff_um: 300.0,
            pitch_nm: None,
        }),
        steady: Default::default(),
        scan: ScanSection {
            dwell_s: C4_DWELL_S,
            detector_efficiency: reference::N3_SCALE_KCPS * 1e3 / 1.885e6,
            seed: 1,
            ..Default::default()
        },
        map2d: Default::default(),
        trajectories: Default::default(),
    }
}

fn reference_base() -> Result<PumpBase> {
    reference_scenario().base()
}

fn scan_us(base: &PumpBase) -> Vec<f64> {
    node_to_antinode_positions(&base.params, crate::scan::DEFAULT_SCAN_POINTS)
        .iter()
        .map(|p| relative_intensity(p.z, &base.params))
        .collect()
}

// ---- criterion 1 ----------------------------------------------------------

const C1_SETS: usize = 50;
const C1_SEED: u64 = 1;

/// Random `(gτ, ⟨N⟩, ξ₁/κ)` with ξ₁/κ log-uniform; τ is fixed and κ follows.
fn criterion_1() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(C1_SEED);
    let tau = 1e-7;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut truncated = 0;
    for _ in 0..C1_SETS {
        let g_tau: f64 = rng.random_range(0.05..2.5);
        let n_atoms: f64 = rng.random_range(0.1..3.0);
        let ratio = (rng.random_range(0.1f64.ln()..50f64.ln())).exp();
        let kappa = n_atoms / tau * g_tau.sin().powi(2) / ratio;
        let pump = PumpParams::new(n_atoms, tau, g_tau / tau, kappa)?;
        let n_max = match kinetics::steady_state(&pump) {
            Ok(p) => p.n_max(),
            Err(_) => {
                truncated += 1;
                failures += 1;
                continue;
            }
        };
        let exact = steady_state_product(&pump, n_max);
        let evolved = evolve_guarded(&PhotonDistribution::vacuum(n_max), &pump, 30.0 / kappa)?;
        let d = exact.max_abs_diff(&evolved);
        worst = worst.max(d);
        if !(d < tolerances::STEADY_EQUIVALENCE) {
            failures += 1;
        }
    }
    Ok((
        failures == 0,
        format!(
            "{}/{} sets within {:e}, worst ‖Δp‖∞ = {:.3e}, {} beyond n_max = {}",
            C1_SETS - failures,
            C1_SETS,
            tolerances::STEADY_EQUIVALENCE,
            worst,
            truncated,
            kinetics::MAX_N_MAX
        ),
    ))
}

// ---- criterion 2 ----------------------------------------------------------

const C2_MEAN_ATOMS: f64 = 0.05;
const C2_G_TAU: f64 = 0.1;

fn criterion_2() -> Result<(bool, String)> {
    let mut base = reference_base()?.with_mean_atoms(C2_MEAN_ATOMS);
    base.velocity = VelocityDistribution::delta(670.0)?;
    let tau = base.mean_tau();
    base = base.with_e_vac0(C2_G_TAU / tau * HBAR / base.params.dipole);
    let kernel = PositionSpreadKernel::delta(base.params.wavelength / 160.0);
    let positions = node_to_antinode_positions(&base.params, crate::scan::DEFAULT_SCAN_POINTS);

    let mut worst_law: f64 = 0.0;
    for &pos in &positions {
        let pump = AveragedPump::new(&base, pos, &kernel)?;
        let xi1 = linear_regime_output(&pump);
        if xi1 <= 1e-300 {
            continue;
        }
        let flux = photon_flux(&kinetics::steady_state(&pump)?, base.params.kappa);
        worst_law = worst_law.max((flux - xi1).abs() / xi1);
    }

    let scan = ScanConfig {
        positions: positions.clone(),
        dwell: 1.0,
        scale: 1.0,
        dark_rate: 0.0,
        seed: 0,
        noise: NoiseModel::None,
        background: false,
    };
    let rec = simulate_scan(&base, &kernel, &scan)?;
    let y: Vec<f64> = rec.iter().map(|r| r.rate).collect();
    let c: Vec<f64> = rec.iter().map(|r| r.u).collect();
    let a = optimal_scale(&y, &c)?;
    let worst_cos2 = y
        .iter()
        .zip(&c)
        .map(|(y, c)| (y - a * c).abs() / a)
        .fold(0.0, f64::max);
    let pass = worst_law < tolerances::LINEAR_LAW && worst_cos2 < tolerances::LINEAR_LAW;
    Ok((
        pass,
        format!(
            "max |κ⟨n⟩−ξ₁|/ξ₁ = {worst_law:.2e}, max cos² residual / peak = {worst_cos2:.2e} (limit {})",
            tolerances::LINEAR_LAW
        ),
    ))
}

// ---- criterion 3 ----------------------------------------------------------

/// Noiseless model data on the default scan, written as a deconvolved file
/// and fitted through the command layer.
fn criterion_3(work_dir: &Path) -> Result<(bool, String)> {
    use reference::*;
    let dir = work_dir.join("criterion3");
    std::fs::create_dir_all(&dir)?;
    let config = dir.join("scenario.json");
    std::fs::write(&config, serde_json::to_string_pretty(&reference_scenario())?)?;
    let base = reference_base()?;
    let us = scan_us(&base);

    let write_data = |name: &str, n: f64, e_v_per_cm: f64| -> Result<std::path::PathBuf> {
        let model = fit::model_curve(n, e_v_per_cm * V_PER_CM_TO_V_PER_M, &us, &base)?;
        let mut t = Table::new(&["u", "deconvolved_value"]);
        for (u, m) in us.iter().zip(model) {
            t.rows.push(vec![fmt_f64(*u), fmt_f64(N3_SCALE_KCPS * 1e3 * m)]);
        }
        let path = dir.join(name);
        t.write(&path)?;
        Ok(path)
    };

    let rel = |a: f64, b: f64| (a - b).abs() / b;
    let n3 = write_data("n3.csv", N3_MEAN_ATOMS, N3_E_VAC0_V_PER_CM)?;
    let r3 = match cmd_fit(&n3, &config, &FitOptions::default(), &dir.join("n3"))? {
        FitOutput::Full(r) => r,
        FitOutput::Linear(_) => unreachable!("full fit requested"),
    };
    let e3 = [
        rel(r3.mean_atoms, N3_MEAN_ATOMS),
        rel(r3.e_vac0_v_per_cm, N3_E_VAC0_V_PER_CM),
        rel(r3.scale, N3_SCALE_KCPS),
    ];

    let n2 = write_data("n2.csv", N2_MEAN_ATOMS, N2_E_VAC0_V_PER_CM)?;
    let opts = FitOptions {
        fix_scale: Some(N3_SCALE_KCPS),
        ..Default::default()
    };
    let r2 = match cmd_fit(&n2, &config, &opts, &dir.join("n2"))? {
        FitOutput::Full(r) => r,
        FitOutput::Linear(_) => unreachable!("full fit requested"),
    };
    let e2 = [rel(r2.mean_atoms, N2_MEAN_ATOMS), rel(r2.e_vac0_v_per_cm, N2_E_VAC0_V_PER_CM)];
    let worst = e3.iter().chain(&e2).copied().fold(0.0, f64::max);
    Ok((
        worst < tolerances::ROUND_TRIP,
        format!(
            "N3 ⟨N⟩ {:.4} E {:.4} V/cm S {:.2} kcps; N2 ⟨N⟩ {:.4} E {:.4} V/cm; worst rel. error {:.2e} (limit {})",
            r3.mean_atoms,
            r3.e_vac0_v_per_cm,
            r3.scale,
            r2.mean_atoms,
            r2.e_vac0_v_per_cm,
            worst,
            tolerances::ROUND_TRIP
        ),
    ))
}

// ---- criterion 4 ----------------------------------------------------------

/// Dwell per scan point (s). The quoted uncertainties come with no
/// statistics, so the dwell is chosen to land the spreads in their band.
pub const C4_DWELL_S: f64 = 0.6;
pub const C4_REPLICAS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaSpread {
    pub fits: usize,
    pub refused: usize,
    /// Sample standard deviations of ⟨N⟩, E_vac0 (V/cm), S (kcps).
    pub spread: [f64; 3],
    /// Mean reported 1σ of the same.
    pub mean_sigma: [f64; 3],
    pub mean: [f64; 3],
}

/// Poisson replicas of the N₃ scan (delta kernel, no background), each
/// fitted with three free parameters.
pub fn replica_spread(dwell: f64, replicas: u64) -> Result<ReplicaSpread> {
    use reference::*;
    let base = reference_base()?;
    let kernel = PositionSpreadKernel::delta(base.params.wavelength / 160.0);
    let mut est: Vec<[f64; 3]> = Vec::new();
    let mut sig: Vec<[f64; 3]> = Vec::new();
    let mut refused = 0;
    for seed in 0..replicas {
        let scan = ScanConfig {
            positions: node_to_antinode_positions(&base.params, crate::scan::DEFAULT_SCAN_POINTS),
            dwell,
            scale: N3_SCALE_KCPS * 1e3 / base.params.kappa,
            dark_rate: 0.0,
            seed,
            noise: NoiseModel::Poisson,
            background: false,
        };
        let points: Vec<FitPoint> = simulate_scan(&base, &kernel, &scan)?
            .iter()
            .map(|r| FitPoint { u: r.u, y: r.rate / 1e3 })
            .collect();
        let mut problem = FitProblem::new(points, base.clone());
        problem.counts_per_unit = Some(dwell * 1e3);
        match fit::fit(&problem) {
            Ok(r) => {
                est.push([r.mean_atoms, r.e_vac0 / V_PER_CM_TO_V_PER_M, r.scale]);
                sig.push([r.sigma_mean_atoms, r.sigma_e_vac0 / V_PER_CM_TO_V_PER_M, r.sigma_scale]);
            }
            Err(_) => refused += 1,
        }
    }
    let m = est.len() as f64;
    let mut mean = [0.0; 3];
    let mut spread = [0.0; 3];
    let mut mean_sigma = [0.0; 3];
    for k in 0..3 {
        mean[k] = est.iter().map(|e| e[k]).sum::<f64>() / m;
        spread[k] = (est.iter().map(|e| (e[k] - mean[k]).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        mean_sigma[k] = sig.iter().map(|s| s[k]).sum::<f64>() / m;
    }
    Ok(ReplicaSpread {
        fits: est.len(),
        refused,
        spread,
        mean_sigma,
        mean,
    })
}

fn criterion_4() -> Result<(bool, String)> {
    use reference::*;
    let r = replica_spread(C4_DWELL_S, C4_REPLICAS)?;
    let quoted = [N3_SIGMA_MEAN_ATOMS, N3_SIGMA_E_VAC0_V_PER_CM, N3_SIGMA_SCALE_KCPS];
    let f = tolerances::SPREAD_FACTOR;
    let within = |v: f64, q: f64| v >= q / f && v <= q * f;
    let pass = r.refused == 0
        && (0..3).all(|k| within(r.spread[k], quoted[k]) && within(r.mean_sigma[k], quoted[k]));
    Ok((
        pass,
        format!(
            "{} fits, {} refused; spread ⟨N⟩ {:.3} E {:.3} V/cm S {:.1} kcps; mean reported σ {:.3} / {:.3} / {:.1}; quoted {} / {} / {} (factor {f})",
            r.fits, r.refused, r.spread[0], r.spread[1], r.spread[2], r.mean_sigma[0], r.mean_sigma[1], r.mean_sigma[2],
            quoted[0], quoted[1], quoted[2]
        ),
    ))
}

// ---- criterion 5 ----------------------------------------------------------

/// cos²(kz) over one wavelength at the default scan pitch, blurred with the
/// 170 nm disc ⊗ 72 nm Gaussian kernel and restored with 50 iterations.
fn criterion_5() -> Result<(bool, String)> {
    let lambda = 791.1e-9;
    let pitch = lambda / 160.0;
    let kernel = build_spread_kernel(170e-9, 0.24e-3, 300e-6, pitch)?;
    let k = 2.0 * std::f64::consts::PI / lambda;
    let z0 = -lambda / 2.0;
    let truth: Vec<f64> = (0..=160).map(|i| (k * (z0 + i as f64 * pitch)).cos().powi(2)).collect();
    let observed = blur(&SignalSeries::new(z0, pitch, truth.clone())?, &kernel)?;
    let total = observed.total();
    let mut rl = RichardsonLucy::new(&observed, &kernel, DEFAULT_EPSILON)?;
    let mut nonneg = true;
    let mut worst_flux: f64 = 0.0;
    for _ in 0..DEFAULT_ITERATIONS {
        rl.step();
        nonneg &= rl.estimate_values().iter().all(|v| *v >= 0.0);
        let t: f64 = rl.estimate_values().iter().sum();
        worst_flux = worst_flux.max((t - total).abs() / total);
    }
    let worst = truth
        .iter()
        .zip(rl.estimate_values())
        .filter(|(t, _)| **t >= 0.2)
        .map(|(t, e)| (e - t).abs() / t)
        .fold(0.0, f64::max);
    let pass = worst < tolerances::DECONV_ERROR && nonneg && worst_flux < tolerances::DECONV_FLUX;
    Ok((
        pass,
        format!(
            "max rel. error (u ≥ 0.2) {worst:.3} (limit {}), nonnegative {nonneg}, max flux drift {worst_flux:.1e} (limit {})",
            tolerances::DECONV_ERROR,
            tolerances::DECONV_FLUX
        ),
    ))
}

// ---- criterion 6 ----------------------------------------------------------

pub const C6_TRAJECTORIES: usize = 10_000;
/// Rabi angle g₀τ and κτ of the comparison pump.
pub const C6_RABI_ANGLE: f64 = 0.6;
pub const C6_KAPPA_TAU: f64 = 0.05;
pub const C6_MEAN_ATOMS: f64 = 1.5;
/// Burn-in before the first checkpoint and final time, in 1/κ.
pub const C6_BURN_IN: f64 = 2.0;
pub const C6_T_FINAL: f64 = 5.0;
pub const C6_SEED: u64 = 7;
/// Atom slots: at ⟨N⟩ = 1.5 the default four queue more than 1% of arrivals.
pub const C6_A_MAX: usize = 6;
const DECAY_TRAJECTORIES: usize = 2000;
const DECAY_FOCK: usize = 5;

/// Single-velocity antinode pump at ⟨N⟩ = 1.5 with g₀τ = 0.6 and κτ = 0.05.
pub fn trajectory_pump_base() -> Result<PumpBase> {
    let mut p = reference_scenario().params();
    let v = 670.0;
    let tau = interaction_time(v, &p)?;
    p.kappa = C6_KAPPA_TAU / tau;
    p.e_vac0 = C6_RABI_ANGLE / tau * HBAR / p.dipole;
    PumpBase::new(p, C6_MEAN_ATOMS, VelocityDistribution::delta(v)?)
}

fn criterion_6() -> Result<(bool, String)> {
    let base = trajectory_pump_base()?;
    let kappa = base.params.kappa;
    let pos = AperturePosition::default();
    let kernel = PositionSpreadKernel::delta(base.params.wavelength / 160.0);
    let pump = AveragedPump::new(&base, pos, &kernel)?;
    let steady = kinetics::steady_state(&pump)?;
    let margin = multi_atom_condition(base.params.peak_coupling(), base.mean_tau(), steady.mean());
    // cutoff where the steady tail drops below 1e-9, plus headroom
    let n_max = (0..=steady.n_max())
        .find(|&n| steady.probs()[n..].iter().sum::<f64>() < 1e-9)
        .unwrap_or(steady.n_max())
        + 4;

    let mut cfg = TrajectoryConfig::new(C6_TRAJECTORIES, C6_T_FINAL / kappa, C6_SEED);
    cfg.a_max = C6_A_MAX;
    cfg.n_max = n_max;
    cfg.checkpoints = (0..10)
        .map(|i| (C6_BURN_IN + (C6_T_FINAL - C6_BURN_IN) * i as f64 / 9.0) / kappa)
        .collect();
    let ens = run_trajectories(&base, pos, &kernel, &cfg)?;
    let master = master_checkpoints(&pump, &PhotonDistribution::vacuum(n_max), &ens.times)?;
    let cmp = compare_with_master(&ens, &master);

    // pure decay from a Fock state against n₀ e^{−κt}
    let idle = base.with_mean_atoms(0.0);
    let mut dcfg = TrajectoryConfig::new(DECAY_TRAJECTORIES, 3.0 / kappa, C6_SEED + 1);
    dcfg.n_max = DECAY_FOCK + 2;
    dcfg.initial = InitialField::Fock(DECAY_FOCK);
    let decay = run_trajectories(&idle, pos, &kernel, &dcfg)?;
    let analytic: Vec<f64> = decay.times.iter().map(|t| DECAY_FOCK as f64 * (-kappa * t).exp()).collect();
    let dcmp = compare_with_master(&decay, &analytic);

    let pass = cmp.pass
        && cmp.max_abs_z <= tolerances::TRAJECTORY_Z
        && dcmp.pass
        && margin <= MULTI_ATOM_THRESHOLD
        && !ens.unreliable
        && ens.invariant_violations == 0;
    Ok((
        pass,
        format!(
            "steady ⟨n⟩ {:.3}, margin {margin:.3}, max |z| {:.2} over {} checkpoints, queued {}/{} arrivals; pure decay max |z| {:.2}",
            steady.mean(),
            cmp.max_abs_z,
            cmp.z.len(),
            ens.jumps.queued,
            ens.jumps.arrivals,
            dcmp.max_abs_z
        ),
    ))
}

// ---- criterion 7 ----------------------------------------------------------

fn criterion_7() -> Result<(bool, String)> {
    let base = reference_base()?;
    let kernel = PositionSpreadKernel::delta(base.params.wavelength / 160.0);
    let pump = AveragedPump::new(&base, AperturePosition::default(), &kernel)?;
    let signal = photon_flux(&kinetics::steady_state(&pump)?, base.params.kappa);
    let bg = background_flux(base.mean_atoms, base.mean_tau())?;
    let ratio = bg / signal;
    Ok((
        ratio < tolerances::BACKGROUND_RATIO,
        format!(
            "background {bg:.3e} /s over antinode signal {signal:.3e} /s = {ratio:.2e} (limit {:e})",
            tolerances::BACKGROUND_RATIO
        ),
    ))
}

// ---- criterion 8 ----------------------------------------------------------

fn runner(seed: u8) -> TestRunner {
    let config = PropConfig {
        cases: tolerances::PROPERTY_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    };
    TestRunner::new_with_rng(config, TestRng::from_seed(RngAlgorithm::ChaCha, &[seed; 32]))
}

fn distribution(w: &[f64]) -> PhotonDistribution {
    PhotonDistribution::from_weights(w.to_vec()).expect("positive weights")
}

type Check = (&'static str, fn(&mut TestRunner) -> std::result::Result<(), String>);

fn property_checks() -> Vec<Check> {
    vec![
        ("steady-state normalization", |r| {
            r.run(&(0.05f64..2.5, 0.1f64..3.0, 0.1f64..20.0), |(gt, n, x)| {
                let tau = 1e-7;
                let kappa = n / tau * gt.sin().powi(2) / x;
                let pump = PumpParams::new(n, tau, gt / tau, kappa).unwrap();
                let p = steady_state_product(&pump, 80);
                prop_assert!((p.total() - 1.0).abs() < 1e-12);
                prop_assert!(p.probs().iter().all(|v| *v >= 0.0));
                Ok(())
            })
            .map_err(|e| e.to_string())
        }),
        ("gain map keeps norm and never lowers ⟨n⟩", |r| {
            r.run(&(prop::collection::vec(0.01f64..1.0, 2..30), 0.0f64..4.0), |(w, gt)| {
                let mut w = w;
                w.push(0.0);
                let p = distribution(&w);
                let q = gain_map(&p, gt, 1.0);
                prop_assert!((q.total() - 1.0).abs() < 1e-12);
                prop_assert!(q.mean() - p.mean() >= -1e-12);
                Ok(())
            })
            .map_err(|e| e.to_string())
        }),
        ("loss preserves trace", |r| {
            r.run(&(prop::collection::vec(0.01f64..1.0, 1..40), 1.0f64..1e7), |(w, kappa)| {
                let p = distribution(&w);
                let s: f64 = loss_rate(&p, kappa).iter().sum();
                prop_assert!(s.abs() <= 1e-12 * kappa * p.n_max().max(1) as f64);
                Ok(())
            })
            .map_err(|e| e.to_string())
        }),
        ("only ξ/κ enters the steady state", |r| {
            r.run(&(0.05f64..2.5, 0.1f64..3.0, 0.1f64..10.0), |(gt, n, c)| {
                let tau = 1e-7;
                let a = PumpParams::new(n, tau, gt / tau, 2e6).unwrap();
                let b = PumpParams::new(c * n, tau, gt / tau, c * 2e6).unwrap();
                prop_assert!(steady_state_product(&a, 60).max_abs_diff(&steady_state_product(&b, 60)) < 1e-12);
                Ok(())
            })
            .map_err(|e| e.to_string())
        }),
        ("delta averaging is the identity", |r| {
            let base = reference_base().unwrap();
            r.run(&(0.05f64..2.0, 0.0f64..2e-7), |(n, z)| {
                let mut b = base.with_mean_atoms(n);
                b.velocity = VelocityDistribution::delta(670.0).unwrap();
                let pos = AperturePosition::on_axis(z);
                let kernel = PositionSpreadKernel::delta(5e-9);
                let avg = AveragedPump::new(&b, pos, &kernel).unwrap();
                let point = b.point_pump(pos).unwrap();
                let d = steady_state_product(&avg, 60).max_abs_diff(&steady_state_product(&point, 60));
                prop_assert!(d < 1e-14);
                Ok(())
            })
            .map_err(|e| e.to_string())
        }),
        ("scan forward identity and seeded determinism", |r| {
            let base = reference_base().unwrap();
            r.run(&(0.05f64..2.0, any::<u64>()), |(n, seed)| {
                let b = base.with_mean_atoms(n);
                let kernel = PositionSpreadKernel::delta(5e-9);
                let mut scan = ScanConfig {
                    positions: node_to_antinode_positions(&b.params, 5),
                    dwell: 0.1,
                    scale: 1.0,
                    dark_rate: 0.0,
                    seed,
                    noise: NoiseModel::None,
                    background: false,
                };
                for rec in simulate_scan(&b, &kernel, &scan).unwrap() {
                    prop_assert_eq!(rec.rate, rec.expected_flux);
                }
                scan.noise = NoiseModel::Poisson;
                prop_assert_eq!(simulate_scan(&b, &kernel, &scan).unwrap(), simulate_scan(&b, &kernel, &scan).unwrap());
                Ok(())
            })
            .map_err(|e| e.to_string())
        }),
        ("Richardson–Lucy nonnegativity and flux", |r| {
            let kernel = build_spread_kernel(170e-9, 0.24e-3, 300e-6, 5e-9).unwrap();
            r.run(&prop::collection::vec(0.0f64..100.0, 60..120), |v| {
                prop_assume!(v.iter().sum::<f64>() > 1.0);
                let s = SignalSeries::new(0.0, 5e-9, v).unwrap();
                let mut rl = RichardsonLucy::new(&s, &kernel, DEFAULT_EPSILON).unwrap();
                for _ in 0..20 {
                    rl.step();
                    prop_assert!(rl.estimate_values().iter().all(|x| *x >= 0.0));
                }
                let t: f64 = rl.estimate_values().iter().sum();
                prop_assert!((t - s.total()).abs() <= tolerances::DECONV_FLUX * s.total());
                Ok(())
            })
            .map_err(|e| e.to_string())
        }),
        ("profile-S optimality", |r| {
            r.run(
                &(prop::collection::vec((0.0f64..10.0, 0.01f64..5.0), 3..30), -10.0f64..10.0),
                |(pairs, s)| {
                    let y: Vec<f64> = pairs.iter().map(|p| p.0).collect();
                    let n: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                    let best = optimal_scale(&y, &n).unwrap();
                    let c0 = chi_square(&y, &n, best);
                    prop_assert!(c0 <= chi_square(&y, &n, s) * (1.0 + 1e-12) + 1e-12);
                    Ok(())
                },
            )
            .map_err(|e| e.to_string())
        }),
        ("trajectory invariants and seeded determinism", |r| {
            let base = trajectory_pump_base().unwrap();
            r.run(&(0.2f64..2.0, any::<u64>()), |(n, seed)| {
                let b = base.with_mean_atoms(n);
                let kernel = PositionSpreadKernel::delta(5e-9);
                let mut cfg = TrajectoryConfig::new(2, 1.0 / b.params.kappa, seed);
                cfg.n_max = 20;
                cfg.record_jumps = true;
                let a = run_trajectories(&b, AperturePosition::default(), &kernel, &cfg).unwrap();
                prop_assert_eq!(a.invariant_violations, 0);
                let again = run_trajectories(&b, AperturePosition::default(), &kernel, &cfg).unwrap();
                prop_assert_eq!(a.jump_times, again.jump_times);
                Ok(())
            })
            .map_err(|e| e.to_string())
        }),
    ]
}

fn criterion_8() -> Result<(bool, String)> {
    let checks = property_checks();
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.iter().enumerate() {
        let mut r = runner(i as u8 + 1);
        if let Err(e) = check(&mut r) {
            failed.push(format!("{name}: {e}"));
        }
    }
    Ok((
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} invariants × {} cases green", checks.len(), tolerances::PROPERTY_CASES)
        } else {
            failed.join("; ")
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn criteria_ids_are_one_to_eight() {
        let ids: Vec<u8> = CRITERIA.iter().map(|c| c.0).collect();
        assert_eq!(ids, (1..=8).collect::<Vec<_>>());
    }

    #[test]
    fn reference_pump_regime() {
        let base = reference_base().unwrap();
        let tau = base.mean_tau();
        let g0_tau = base.params.peak_coupling() * tau;
        assert!((g0_tau - 0.9).abs() < 0.02, "{g0_tau}");
        assert!((base.params.kappa * tau - 0.1).abs() < 0.005);
    }

    #[test]
    fn trajectory_pump_settings() {
        let b = trajectory_pump_base().unwrap();
        let tau = b.mean_tau();
        assert!((b.params.peak_coupling() * tau - C6_RABI_ANGLE).abs() < 1e-12);
        assert!((b.params.kappa * tau - C6_KAPPA_TAU).abs() < 1e-12);
    }

    #[test]
    fn unknown_criterion_is_an_error() {
        assert!(run_criterion(9, Path::new(".")).is_err());
    }
}
