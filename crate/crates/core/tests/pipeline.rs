use std::path::{Path, PathBuf};

use cavity_vacuum::acceptance::reference_scenario;
use cavity_vacuum::config::Scenario;
use cavity_vacuum::io::{without_timestamp, Table};
use cavity_vacuum::pipeline::{self, DeconvolveOptions, FitOptions, FitOutput, ANTINODE_KEY};
use cavity_vacuum::Error;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn save(dir: &Path, name: &str, s: &Scenario) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(s).unwrap()).unwrap();
    p
}

/// Reference scenario without noise, kernel or background.
fn clean_reference() -> Scenario {
    let mut s = reference_scenario();
    s.kernel = None;
    s.scan.noise = cavity_vacuum::scan::NoiseModel::None;
    s.scan.background = false;
    s
}

#[test]
fn shipped_configs_load() {
    for name in ["reference.json", "linear.json", "trajectory.json"] {
        let (s, hash) = Scenario::load(&configs().join(name)).unwrap();
        assert_eq!(hash.len(), 64);
        s.base().unwrap();
    }
}

#[test]
fn reference_config_matches_acceptance_scenario() {
    let (s, _) = Scenario::load(&configs().join("reference.json")).unwrap();
    assert_eq!(s, reference_scenario());
}

#[test]
fn steady_table_matches_summary() {
    let dir = tempfile::tempdir().unwrap();
    let s = pipeline::cmd_steady(&configs().join("reference.json"), dir.path()).unwrap();
    let path = dir.path().join("steady.csv");
    let p = Table::read(&path).unwrap().column("p", &path).unwrap();
    assert_eq!(p, s.probs);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(!s.truncated);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("steady.json")).unwrap()).unwrap();
    assert_eq!(json["mean_photons"].as_f64().unwrap(), s.mean_photons);
}

#[test]
fn scan_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("reference.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline::cmd_scan(&cfg, &a).unwrap();
    pipeline::cmd_scan(&cfg, &b).unwrap();
    for f in ["scan.csv", "kernel.csv"] {
        let ta = std::fs::read_to_string(a.join(f)).unwrap();
        let tb = std::fs::read_to_string(b.join(f)).unwrap();
        assert_eq!(without_timestamp(&ta), without_timestamp(&tb), "{f}");
    }
}

#[test]
fn noiseless_scan_fits_back_to_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = save(dir.path(), "clean.json", &clean_reference());
    pipeline::cmd_scan(&cfg, dir.path()).unwrap();
    let out = pipeline::cmd_fit(&dir.path().join("scan.csv"), &cfg, &FitOptions::default(), dir.path()).unwrap();
    let FitOutput::Full(r) = out else { panic!("full fit expected") };
    assert!((r.mean_atoms / 1.5 - 1.0).abs() < 1e-3, "{}", r.mean_atoms);
    assert!((r.e_vac0_v_per_cm / 0.86 - 1.0).abs() < 1e-3, "{}", r.e_vac0_v_per_cm);
    assert!((r.scale / 270.0 - 1.0).abs() < 1e-3, "{}", r.scale);
}

#[test]
fn deconvolution_keeps_flux_and_antinode() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = clean_reference();
    s.kernel = reference_scenario().kernel;
    let cfg = save(dir.path(), "blur.json", &s);
    pipeline::cmd_scan(&cfg, dir.path()).unwrap();
    let scan = dir.path().join("scan.csv");
    let d = pipeline::cmd_deconvolve(&scan, &dir.path().join("kernel.csv"), &cfg, DeconvolveOptions::default(), dir.path())
        .unwrap();
    assert_eq!(d.z_antinode, 0.0);
    assert!((d.total_out / d.total_in - 1.0).abs() < 1e-9);
    let path = dir.path().join("deconvolved.csv");
    let t = Table::read(&path).unwrap();
    assert_eq!(t.header_value(ANTINODE_KEY), Some("0.0000000000000000e0"));
    let u_scan = Table::read(&scan).unwrap().column("u", &scan).unwrap();
    for (a, b) in t.column("u", &path).unwrap().iter().zip(&u_scan) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(t.column("deconvolved_value", &path).unwrap().iter().all(|v| *v >= 0.0));
}

#[test]
fn linear_fit_needs_held_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("linear.json");
    pipeline::cmd_scan(&cfg, dir.path()).unwrap();
    let scan = dir.path().join("scan.csv");
    let opts = FitOptions {
        linear_n: true,
        ..Default::default()
    };
    assert!(matches!(pipeline::cmd_fit(&scan, &cfg, &opts, dir.path()), Err(Error::Config(_))));
    let opts = FitOptions {
        fix_scale: Some(1885.0),
        ..opts
    };
    let FitOutput::Linear(r) = pipeline::cmd_fit(&scan, &cfg, &opts, dir.path()).unwrap() else {
        panic!("linear fit expected")
    };
    assert!((r.mean_atoms - 0.05).abs() < 4.0 * r.sigma_mean_atoms + 1e-3, "{} ± {}", r.mean_atoms, r.sigma_mean_atoms);
}
