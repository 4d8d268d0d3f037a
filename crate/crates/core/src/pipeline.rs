//! Command bodies: read a scenario and/or data files, run one stage, write
//! its tables and a manifest into the output directory.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Scenario;
use crate::deconv::{estimate_antinode, richardson_lucy, to_intensity_axis, RlOptions, SignalSeries};
use crate::ensemble::{averaged_steady_state, AveragedPump};
use crate::error::{Error, Result};
use crate::fit::{self, FitPoint, FitProblem, FitReport, Weighting};
use crate::io::{fmt_f64, kernel_from_table, kernel_table, Table};
use crate::kinetics::{self, photon_flux};
use crate::manifest::RunManifest;
use crate::physics::{coupling_at, V_PER_CM_TO_V_PER_M};
use crate::scan::{simulate_scan, surface_map, ScanRecord};
use crate::trajectory::{compare_with_master, master_checkpoints, multi_atom_condition, run_trajectories, Comparison, JumpSummary, MULTI_ATOM_THRESHOLD};

/// Fit data are handled in kcps so the fitted scale reads directly in kcps
/// per unit ⟨n⟩.
const CPS_PER_KCPS: f64 = 1e3;

fn load(config: &Path, command: &str) -> Result<(Scenario, RunManifest)> {
    let (scenario, hash) = Scenario::load(config)?;
    let mut m = RunManifest::new(command);
    m.config_sha256 = Some(hash);
    m.inputs.push(crate::manifest::FileRef {
        path: config.display().to_string(),
        sha256: None,
    });
    Ok((scenario, m))
}

/// Output paths; the manifest records names relative to `out_dir` so its
/// hash does not depend on where the run was written.
fn outputs(m: &mut RunManifest, out_dir: &Path, names: &[&str]) -> Vec<PathBuf> {
    names
        .iter()
        .map(|n| {
            m.outputs.push(n.to_string());
            out_dir.join(n)
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, m: &RunManifest, value: &T) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    if let Some(obj) = v.as_object_mut() {
        obj.insert("manifest_sha256".into(), m.hash().into());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadySummary {
    pub x_m: f64,
    pub z_m: f64,
    pub mean_photons: f64,
    pub flux_hz: f64,
    pub n_max: usize,
    pub tail: f64,
    pub truncated: bool,
    #[serde(skip)]
    pub probs: Vec<f64>,
}

/// Averaged steady state at the configured position. Writes `steady.csv`
/// `(n, p)` and `steady.json`.
pub fn cmd_steady(config: &Path, out_dir: &Path) -> Result<SteadySummary> {
    let (s, mut m) = load(config, "steady")?;
    let base = s.base()?;
    let kernel = s.kernel()?;
    let pos = s.steady_position();
    let p = averaged_steady_state(pos, &base, &kernel)?;
    let summary = SteadySummary {
        x_m: pos.x,
        z_m: pos.z,
        mean_photons: p.mean(),
        flux_hz: photon_flux(&p, base.params.kappa),
        n_max: p.n_max(),
        tail: p.tail(),
        truncated: p.is_truncated(),
        probs: p.probs().to_vec(),
    };
    let files = outputs(&mut m, out_dir, &["steady.csv", "steady.json"]);
    let mut t = m.stamp(Table::new(&["n", "p"]));
    for (n, v) in summary.probs.iter().enumerate() {
        t.rows.push(vec![n.to_string(), fmt_f64(*v)]);
    }
    t.write(&files[0])?;
    write_json(&files[1], &m, &summary)?;
    m.finish(out_dir)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutput {
    pub records: Vec<ScanRecord>,
    pub warnings: Vec<String>,
}

/// Synthetic z-scan. Writes `scan.csv` and the kernel used, `kernel.csv`.
pub fn cmd_scan(config: &Path, out_dir: &Path) -> Result<ScanOutput> {
    let (s, mut m) = load(config, "scan")?;
    let base = s.base()?;
    let kernel = s.kernel()?;
    let scan = s.scan_config();
    m.seed = Some(scan.seed);
    let records = simulate_scan(&base, &kernel, &scan)?;
    let files = outputs(&mut m, out_dir, &["scan.csv", "kernel.csv"]);

    let mut t = m
        .stamp(Table::new(&["x_m", "z_m", "u", "expected_flux_hz", "counts", "rate_cps"]))
        .meta("dwell_s", fmt_f64(scan.dwell))
        .meta("noise", format!("{:?}", scan.noise).to_lowercase())
        .meta(ANTINODE_KEY, fmt_f64(0.0));
    let mut warnings = Vec::new();
    for r in &records {
        t.rows.push(vec![
            fmt_f64(r.position.x),
            fmt_f64(r.position.z),
            fmt_f64(r.u),
            fmt_f64(r.expected_flux),
            r.counts.to_string(),
            fmt_f64(r.rate),
        ]);
        if let Some(w) = &r.warning {
            warnings.push(format!("z = {:e} m: {w}", r.position.z));
        }
    }
    t.write(&files[0])?;
    m.stamp(kernel_table(&kernel))
        .meta("pitch_m", fmt_f64(kernel.pitch()))
        .write(&files[1])?;
    m.finish(out_dir)?;
    Ok(ScanOutput { records, warnings })
}

/// Linear-regime surface map. Writes `map2d.csv` in long form.
pub fn cmd_map2d(config: &Path, out_dir: &Path) -> Result<Option<String>> {
    let (s, mut m) = load(config, "map2d")?;
    let base = s.base()?;
    let (xs, zs) = s.map_grid()?;
    let map = surface_map(&base, &xs, &zs);
    let files = outputs(&mut m, out_dir, &["map2d.csv"]);
    let mut t = m.stamp(Table::new(&["x_m", "z_m", "flux_hz"]));
    if let Some(w) = &map.warning {
        t = t.meta("warning", w);
    }
    for (iz, z) in zs.iter().enumerate() {
        for (ix, x) in xs.iter().enumerate() {
            t.push_numbers(&[*x, *z, map.flux[iz][ix]]);
        }
    }
    t.write(&files[0])?;
    m.finish(out_dir)?;
    Ok(map.warning)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DeconvolveOptions {
    pub rl: RlOptions,
    /// Antinode position (m); estimated from the data when absent.
    pub antinode: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeconvolveOutput {
    pub iterations: usize,
    pub z_antinode: f64,
    pub total_in: f64,
    pub total_out: f64,
}

/// Header carrying the antinode position of a scan or deconvolved file.
pub const ANTINODE_KEY: &str = "z_antinode_m";

/// Richardson–Lucy on the `rate_cps` column of a scan file; the scenario
/// supplies the wavelength of the intensity axis. Writes `deconvolved.csv`
/// with the added columns `u` and `deconvolved_value`.
///
/// The antinode comes from `opts.antinode`, else the scan header, else a
/// standing-wave fit to the data. The fit is only reliable where the signal
/// is monotone in the intensity.
pub fn cmd_deconvolve(
    scan: &Path,
    kernel: &Path,
    config: &Path,
    opts: DeconvolveOptions,
    out_dir: &Path,
) -> Result<DeconvolveOutput> {
    let (s, mut m) = load(config, "deconvolve")?;
    let wavelength = s.params().wavelength;
    m.input(scan)?;
    m.input(kernel)?;
    m.flags = vec![
        format!("--iters={}", opts.rl.iterations),
        format!("--epsilon={}", fmt_f64(opts.rl.epsilon)),
    ];
    if let Some(tol) = opts.rl.early_stop {
        m.flags.push(format!("--early-stop={}", fmt_f64(tol)));
    }
    if let Some(a) = opts.antinode {
        m.flags.push(format!("--antinode={}", fmt_f64(a)));
    }
    let table = Table::read(scan)?;
    let kernel = kernel_from_table(&Table::read(kernel)?, kernel)?;
    let xs = table.column("x_m", scan)?;
    let zs = table.column("z_m", scan)?;
    let rates = table.column("rate_cps", scan)?;
    let series = SignalSeries::from_points(&zs, rates.clone())?;
    let out = richardson_lucy(&series, &kernel, opts.rl)?;
    let recorded = table.header_value(ANTINODE_KEY).and_then(|v| v.parse::<f64>().ok());
    let z_antinode = match opts.antinode.or(recorded) {
        Some(a) => a,
        None => estimate_antinode(&series, wavelength)?,
    };
    let axis = to_intensity_axis(&out.series, wavelength, z_antinode);

    let files = outputs(&mut m, out_dir, &["deconvolved.csv"]);
    let mut t = m
        .stamp(Table::new(&["x_m", "z_m", "rate_cps", "u", "deconvolved_value"]))
        .meta("iterations", out.iterations)
        .meta("epsilon", fmt_f64(opts.rl.epsilon))
        .meta("floor", fmt_f64(out.floor))
        .meta(ANTINODE_KEY, fmt_f64(z_antinode));
    if let Some(d) = table.header_value("dwell_s") {
        t = t.meta("dwell_s", d);
    }
    for i in 0..zs.len() {
        t.push_numbers(&[xs[i], zs[i], rates[i], axis[i].0, axis[i].1]);
    }
    t.write(&files[0])?;
    m.finish(out_dir)?;
    Ok(DeconvolveOutput {
        iterations: out.iterations,
        z_antinode,
        total_in: series.total(),
        total_out: out.series.total(),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitOptions {
    /// Held scale in kcps per unit ⟨n⟩.
    pub fix_scale: Option<f64>,
    /// 1σ of the held scale, propagated into a second set of uncertainties.
    pub scale_sigma: Option<f64>,
    /// Linear-regime one-parameter fit of ⟨N⟩; needs `fix_scale`.
    pub linear_n: bool,
    /// Field (V/cm) for the linear-regime fit; defaults to the scenario's.
    pub e_vac0_v_per_cm: Option<f64>,
    pub window: Option<(f64, f64)>,
    /// Detector counts per kcps of data, i.e. dwell × 1000.
    pub counts_per_unit: Option<f64>,
    pub poisson_weights: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum FitOutput {
    Full(FitReport),
    Linear(LinearReport),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearReport {
    pub mean_atoms: f64,
    pub sigma_mean_atoms: f64,
    pub mean_atoms_numeric: f64,
    pub e_vac0_v_per_cm: f64,
    pub scale_kcps: f64,
    pub chi2: f64,
    pub points_used: usize,
}

/// Fit a deconvolved file (`u`, `deconvolved_value`) or a raw scan file
/// (`u`, `rate_cps`). Writes `fit.json` and the overlay `fit_overlay.csv`
/// with columns `u, y_kcps, model_kcps`.
pub fn cmd_fit(data: &Path, config: &Path, opts: &FitOptions, out_dir: &Path) -> Result<FitOutput> {
    let (s, mut m) = load(config, "fit")?;
    m.input(data)?;
    m.flags = fit_flags(opts);
    let base = s.base()?;
    let table = Table::read(data)?;
    let us = table.column("u", data)?;
    let ys = if table.columns.iter().any(|c| c == "deconvolved_value") {
        table.column("deconvolved_value", data)?
    } else {
        table.column("rate_cps", data)?
    };
    let points: Vec<FitPoint> = us
        .iter()
        .zip(&ys)
        .map(|(&u, &y)| FitPoint { u, y: y / CPS_PER_KCPS })
        .collect();
    let mut problem = FitProblem::new(points.clone(), base.clone());
    if let Some(w) = opts.window {
        problem.window = w;
    }
    problem.counts_per_unit = opts.counts_per_unit;
    if opts.poisson_weights {
        problem.weighting = Weighting::Poisson;
    }

    let files = outputs(&mut m, out_dir, &["fit.json", "fit_overlay.csv"]);
    let (report, n_atoms, e_vac0, scale) = if opts.linear_n {
        let scale = opts
            .fix_scale
            .ok_or_else(|| Error::Config("--linear-N needs --fix-scale".into()))?;
        let e = opts.e_vac0_v_per_cm.map_or(base.params.e_vac0, |v| v * V_PER_CM_TO_V_PER_M);
        let lf = fit::fit_linear_regime_n(&problem, e, scale)?;
        let rep = LinearReport {
            mean_atoms: lf.mean_atoms,
            sigma_mean_atoms: lf.sigma,
            mean_atoms_numeric: lf.mean_atoms_numeric,
            e_vac0_v_per_cm: e / V_PER_CM_TO_V_PER_M,
            scale_kcps: scale,
            chi2: lf.chi2,
            points_used: lf.points_used,
        };
        (FitOutput::Linear(rep), lf.mean_atoms, e, scale)
    } else {
        let r = match opts.fix_scale {
            Some(sc) => fit::fit_fixed_scale(&problem, sc, opts.scale_sigma)?,
            None => fit::fit(&problem)?,
        };
        let (n, e, sc) = (r.mean_atoms, r.e_vac0, r.scale);
        (FitOutput::Full(FitReport::from(&r)), n, e, sc)
    };

    let model = if opts.linear_n {
        linear_curve(n_atoms, e_vac0, &us, &base)?
    } else {
        fit::model_curve(n_atoms, e_vac0, &us, &base)?
    };
    let mut t = m.stamp(Table::new(&["u", "y_kcps", "model_kcps"]));
    for (p, n) in points.iter().zip(&model) {
        t.push_numbers(&[p.u, p.y, scale * n]);
    }
    t.write(&files[1])?;
    write_json(&files[0], &m, &report)?;
    m.finish(out_dir)?;
    Ok(report)
}

fn fit_flags(o: &FitOptions) -> Vec<String> {
    let mut f = Vec::new();
    if let Some(s) = o.fix_scale {
        f.push(format!("--fix-scale={}", fmt_f64(s)));
    }
    if let Some(s) = o.scale_sigma {
        f.push(format!("--scale-sigma={}", fmt_f64(s)));
    }
    if o.linear_n {
        f.push("--linear-N".into());
    }
    if let Some(e) = o.e_vac0_v_per_cm {
        f.push(format!("--e-vac0={}", fmt_f64(e)));
    }
    if let Some((a, b)) = o.window {
        f.push(format!("--window={},{}", fmt_f64(a), fmt_f64(b)));
    }
    if let Some(c) = o.counts_per_unit {
        f.push(format!("--counts-per-unit={}", fmt_f64(c)));
    }
    if o.poisson_weights {
        f.push("--poisson-weights".into());
    }
    f
}

/// Linear-law ⟨n⟩ per point, `ξ₁/κ` of the velocity-averaged pump.
fn linear_curve(mean_atoms: f64, e_vac0: f64, us: &[f64], base: &crate::ensemble::PumpBase) -> Result<Vec<f64>> {
    let b = base.with_mean_atoms(mean_atoms).with_e_vac0(e_vac0);
    let g0 = b.params.peak_coupling();
    us.iter()
        .map(|&u| {
            let pump = AveragedPump::velocity_averaged(&b, g0 * u.max(0.0).sqrt())?;
            Ok(kinetics::linear_regime_output(&pump) / b.params.kappa)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryReport {
    pub trajectories: usize,
    pub margin: f64,
    pub margin_satisfied: bool,
    pub master_steady_mean: f64,
    pub comparison: Comparison,
    pub jumps: JumpSummary,
    pub unreliable: bool,
    pub warnings: Vec<String>,
}

/// Trajectory ensemble against the master equation from the same initial
/// state. Writes `trajectories.csv` `(t_s, mean_n, stderr, master_n)` and
/// `trajectories.json`.
pub fn cmd_trajectories(config: &Path, out_dir: &Path) -> Result<TrajectoryReport> {
    let (s, mut m) = load(config, "trajectories")?;
    let base = s.base()?;
    let kernel = s.kernel()?;
    let pos = s.trajectory_position();
    let cfg = s.trajectory_config();
    m.seed = Some(cfg.seed);
    let ens = run_trajectories(&base, pos, &kernel, &cfg)?;
    let pump = AveragedPump::new(&base, pos, &kernel)?;
    let start = match cfg.initial {
        crate::trajectory::InitialField::Fock(n) => kinetics::PhotonDistribution::fock(n, cfg.n_max),
        _ => kinetics::PhotonDistribution::vacuum(cfg.n_max),
    };
    let master = master_checkpoints(&pump, &start, &ens.times)?;
    let steady = kinetics::steady_state(&pump)?.mean();
    let margin = multi_atom_condition(coupling_at(pos, &base.params), base.mean_tau(), steady);
    let comparison = compare_with_master(&ens, &master);
    let mut warnings = ens.warnings.clone();
    if margin > MULTI_ATOM_THRESHOLD {
        warnings.push(format!("multi-atom condition violated: margin {margin:.3} > {MULTI_ATOM_THRESHOLD}"));
    }
    let report = TrajectoryReport {
        trajectories: cfg.trajectories,
        margin,
        margin_satisfied: margin <= MULTI_ATOM_THRESHOLD,
        master_steady_mean: steady,
        comparison,
        jumps: ens.jumps,
        unreliable: ens.unreliable,
        warnings,
    };
    let files = outputs(&mut m, out_dir, &["trajectories.csv", "trajectories.json"]);
    let mut t = m.stamp(Table::new(&["t_s", "mean_n", "stderr", "master_n"]));
    for i in 0..ens.times.len() {
        t.push_numbers(&[ens.times[i], ens.mean[i], ens.stderr[i], master[i]]);
    }
    t.write(&files[0])?;
    write_json(&files[1], &m, &report)?;
    m.finish(out_dir)?;
    Ok(report)
}
