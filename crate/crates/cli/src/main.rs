use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cavity_vacuum::acceptance::{run_criterion, CRITERIA};
use cavity_vacuum::deconv::{RlOptions, DEFAULT_EPSILON, DEFAULT_ITERATIONS};
use cavity_vacuum::pipeline::{self, DeconvolveOptions, FitOptions, FitOutput};
use cavity_vacuum::Error;

/// Output directory override.
const OUT_DIR_ENV: &str = "CAVITY_VACUUM_OUT_DIR";

const EXIT_ACCEPTANCE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICS: u8 = 3;
const EXIT_FIT: u8 = 4;

#[derive(Parser)]
#[command(name = "cavity-vacuum", version, about = "Cavity vacuum-field imaging: forward model, deconvolution, calibration fits")]
struct Cli {
    /// Directory for output tables and manifests.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Averaged steady-state photon distribution at the configured position.
    Steady {
        #[arg(long)]
        config: PathBuf,
    },
    /// Synthetic z-scan with detector noise; also writes the kernel used.
    Scan {
        #[arg(long)]
        config: PathBuf,
    },
    /// Linear-regime xz surface map.
    Map2d {
        #[arg(long)]
        config: PathBuf,
    },
    /// Richardson–Lucy deconvolution of a scan file.
    Deconvolve {
        scan: PathBuf,
        kernel: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
        iters: usize,
        /// Floor relative to the series maximum.
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        /// Stop once the max relative update is below this value.
        #[arg(long)]
        early_stop: Option<f64>,
        /// Antinode position in metres; estimated from the data if absent.
        #[arg(long, allow_hyphen_values = true)]
        antinode: Option<f64>,
    },
    /// Calibration fit of a deconvolved (or raw scan) file.
    Fit {
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Hold the scale at this value (kcps per unit ⟨n⟩).
        #[arg(long)]
        fix_scale: Option<f64>,
        /// 1σ of the held scale, propagated into extra uncertainties.
        #[arg(long, requires = "fix_scale")]
        scale_sigma: Option<f64>,
        /// One-parameter linear-regime fit of ⟨N⟩.
        #[arg(long = "linear-N", requires = "fix_scale")]
        linear_n: bool,
        /// Field for --linear-N (V/cm); defaults to the scenario value.
        #[arg(long, requires = "linear_n")]
        e_vac0: Option<f64>,
        #[arg(long, num_args = 2, value_names = ["U_MIN", "U_MAX"])]
        window: Option<Vec<f64>>,
        /// Detector counts per kcps of data (dwell × 1000).
        #[arg(long)]
        counts_per_unit: Option<f64>,
        #[arg(long)]
        poisson_weights: bool,
    },
    /// Quantum-trajectory ensemble compared with the master equation.
    Trajectories {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the acceptance suite.
    Acceptance {
        /// Print the criterion ids and exit.
        #[arg(long)]
        list: bool,
        /// Run only these criteria.
        #[arg(long, num_args = 1..)]
        only: Vec<u8>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Truncated { .. } | Error::Unstable { .. } => EXIT_NUMERICS,
        Error::FitRefused(_) | Error::NotConverged { .. } => EXIT_FIT,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command, &cli.out_dir) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command, out: &Path) -> cavity_vacuum::Result<u8> {
    match command {
        Command::Steady { config } => {
            let s = pipeline::cmd_steady(&config, out)?;
            for (n, p) in s.probs.iter().enumerate() {
                println!("{n}\t{p:.6e}");
            }
            println!("<n> = {:.8}", s.mean_photons);
            println!("flux = {:.6e} photons/s", s.flux_hz);
            println!("n_max = {}, p(n_max) = {:.3e}", s.n_max, s.tail);
        }
        Command::Scan { config } => {
            let s = pipeline::cmd_scan(&config, out)?;
            println!("{} scan points written to {}", s.records.len(), out.join("scan.csv").display());
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Map2d { config } => {
            if let Some(w) = pipeline::cmd_map2d(&config, out)? {
                eprintln!("warning: {w}");
            }
            println!("map written to {}", out.join("map2d.csv").display());
        }
        Command::Deconvolve {
            scan,
            kernel,
            config,
            iters,
            epsilon,
            early_stop,
            antinode,
        } => {
            let opts = DeconvolveOptions {
                rl: RlOptions {
                    iterations: iters,
                    epsilon,
                    early_stop,
                },
                antinode,
            };
            let d = pipeline::cmd_deconvolve(&scan, &kernel, &config, opts, out)?;
            println!(
                "{} iterations, antinode at {:.6e} m, total {:.6e} -> {:.6e}",
                d.iterations, d.z_antinode, d.total_in, d.total_out
            );
        }
        Command::Fit {
            data,
            config,
            fix_scale,
            scale_sigma,
            linear_n,
            e_vac0,
            window,
            counts_per_unit,
            poisson_weights,
        } => {
            let opts = FitOptions {
                fix_scale,
                scale_sigma,
                linear_n,
                e_vac0_v_per_cm: e_vac0,
                window: window.map(|w| (w[0], w[1])),
                counts_per_unit,
                poisson_weights,
            };
            match pipeline::cmd_fit(&data, &config, &opts, out)? {
                FitOutput::Full(r) => {
                    println!("<N>     = {:.6} ± {:.6}", r.mean_atoms, r.sigma_mean_atoms);
                    println!("E_vac0  = {:.6} ± {:.6} V/cm", r.e_vac0_v_per_cm, r.sigma_e_vac0_v_per_cm);
                    println!("S       = {:.4} ± {:.4} kcps{}", r.scale, r.sigma_scale, if r.scale_held { " (held)" } else { "" });
                    println!("chi2    = {:.6e} over M = {}", r.chi2, r.points_used);
                    for w in &r.warnings {
                        eprintln!("warning: {w}");
                    }
                }
                FitOutput::Linear(r) => {
                    println!("<N> = {:.8} ± {:.8} (numeric {:.8})", r.mean_atoms, r.sigma_mean_atoms, r.mean_atoms_numeric);
                }
            }
        }
        Command::Trajectories { config } => {
            let r = pipeline::cmd_trajectories(&config, out)?;
            let c = &r.comparison;
            for i in 0..c.times.len() {
                println!(
                    "t = {:.4e} s  <n> = {:.5} ± {:.5}  master {:.5}  z = {:+.2}",
                    c.times[i], c.trajectory_mean[i], c.stderr[i], c.master_mean[i], c.z[i]
                );
            }
            println!("margin {:.3}, max |z| {:.2}, {}", r.margin, c.max_abs_z, if c.pass { "agree" } else { "disagree" });
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Acceptance { list, only } => {
            if list {
                for (id, name) in CRITERIA {
                    println!("{id}\t{name}");
                }
                return Ok(0);
            }
            let ids: Vec<u8> = if only.is_empty() { CRITERIA.iter().map(|c| c.0).collect() } else { only };
            let work = out.join("acceptance");
            let mut all = true;
            for id in ids {
                let r = run_criterion(id, &work)?;
                println!("{}", r.line());
                all &= r.pass;
            }
            println!("{}", if all { "acceptance: PASS" } else { "acceptance: FAIL" });
            return Ok(if all { 0 } else { EXIT_ACCEPTANCE });
        }
    }
    Ok(0)
}
