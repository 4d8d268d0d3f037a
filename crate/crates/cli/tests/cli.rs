use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cavity-vacuum");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .env_remove("CAVITY_VACUUM_OUT_DIR")
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn strip_timestamp(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with("# created_unix_s:"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn column(text: &str, name: &str) -> Vec<f64> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().parse().unwrap()).collect()
}

const LINEAR: &str = r#"{
  "physics": {"wavelength_nm": 791.1, "waist_um": 20.0, "kappa_per_s": 1885000.0,
              "dipole_c_m": 2.086e-29, "e_vac0_v_per_cm": 0.1, "gamma_per_s": 310000.0, "rho_ee0": 1.0},
  "beam": {"mean_atoms": 0.05, "velocity_mean_m_per_s": 670.0},
  "scan": {"points": 9, "dwell_s": 2.0, "seed": SEED, "background": false},
  "map2d": {"x_min_um": -10.0, "x_max_um": 10.0, "x_points": 3, "z_min_nm": -200.0, "z_max_nm": 200.0, "z_points": 17}
}"#;

fn linear(seed: u64) -> String {
    LINEAR.replace("SEED", &seed.to_string())
}

#[test]
fn list_prints_eight_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["acceptance", "--list"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text.starts_with("1\t"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let broken = write(dir.path(), "broken.json", "{\"physics\": {");
    let unknown = write(dir.path(), "unknown.json", &linear(1).replacen("\"seed\"", "\"sead\"", 1));
    let negative = write(dir.path(), "neg.json", &linear(1).replace("\"mean_atoms\": 0.05", "\"mean_atoms\": -1.0"));
    for cfg in [&broken, &unknown, &negative, &dir.path().join("missing.json")] {
        let o = run(dir.path(), &["steady", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 2, "{}", cfg.display());
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
    assert_eq!(code(&run(dir.path(), &["steady"])), 2);
    assert_eq!(code(&run(dir.path(), &["acceptance", "--only", "9"])), 2);
}

#[test]
fn truncation_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("reference.json")).unwrap();
    let cfg = write(dir.path(), "big.json", &text.replace("\"mean_atoms\": 1.5", "\"mean_atoms\": 5000.0"));
    let o = run(dir.path(), &["steady", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn unidentifiable_fit_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lin.json", &linear(2));
    let out = dir.path().join("out");
    assert_eq!(code(&run(&out, &["scan", "--config", cfg.to_str().unwrap()])), 0);
    let scan = out.join("scan.csv");
    let o = run(&out, &["fit", scan.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    let o = run(&out, &["fit", scan.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--linear-N"]);
    assert_eq!(code(&o), 2, "--linear-N without --fix-scale is a usage error");
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lin.json", &linear(11));
    let other = write(dir.path(), "lin12.json", &linear(12));
    let read = |out: &str, cfg: &Path| {
        let out = dir.path().join(out);
        assert_eq!(code(&run(&out, &["scan", "--config", cfg.to_str().unwrap()])), 0);
        std::fs::read_to_string(out.join("scan.csv")).unwrap()
    };
    let a = read("a", &cfg);
    let b = read("b", &cfg);
    let c = read("c", &other);
    assert_eq!(strip_timestamp(&a), strip_timestamp(&b));
    assert_ne!(column(&a, "counts"), column(&c, "counts"));
    assert_eq!(column(&a, "expected_flux_hz"), column(&c, "expected_flux_hz"));
}

#[test]
fn node_only_scan_counts_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let text = linear(5).replace("\"points\": 9", "\"points\": 1, \"z_start_nm\": 197.775");
    let cfg = write(dir.path(), "node.json", &text);
    assert_eq!(code(&run(dir.path(), &["scan", "--config", cfg.to_str().unwrap()])), 0);
    let scan = std::fs::read_to_string(dir.path().join("scan.csv")).unwrap();
    assert_eq!(column(&scan, "counts"), vec![0.0]);
    assert!(column(&scan, "u")[0] < 1e-20);
}

#[test]
fn map_centre_column_follows_cos_squared() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lin.json", &linear(1));
    let o = run(dir.path(), &["map2d", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(o.stderr.is_empty(), "linear config should not warn");
    let map = std::fs::read_to_string(dir.path().join("map2d.csv")).unwrap();
    let (xs, zs, flux) = (column(&map, "x_m"), column(&map, "z_m"), column(&map, "flux_hz"));
    let k = 2.0 * std::f64::consts::PI / 791.1e-9;
    let centre: Vec<(f64, f64)> = (0..xs.len())
        .filter(|&i| xs[i] == 0.0)
        .map(|i| ((k * zs[i]).cos().powi(2), flux[i]))
        .collect();
    assert_eq!(centre.len(), 17);
    let peak = centre.iter().map(|c| c.1).fold(0.0, f64::max);
    for (u, f) in centre {
        assert!((f / peak - u).abs() < 0.01, "u {u} flux ratio {}", f / peak);
    }
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lin.json", &linear(1));
    let out = dir.path().join("env-out");
    let o = Command::new(BIN)
        .env("CAVITY_VACUUM_OUT_DIR", &out)
        .args(["steady", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(out.join("steady.csv").exists());
    assert!(out.join("steady.manifest.json").exists());
}

#[test]
fn scan_deconvolve_fit_chain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("reference.json");
    let cfg = cfg.to_str().unwrap();
    let out = dir.path();
    assert_eq!(code(&run(out, &["scan", "--config", cfg])), 0);
    let (scan, kernel) = (out.join("scan.csv"), out.join("kernel.csv"));
    let o = run(out, &["deconvolve", scan.to_str().unwrap(), kernel.to_str().unwrap(), "--config", cfg, "--iters", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dec = std::fs::read_to_string(out.join("deconvolved.csv")).unwrap();
    assert!(dec.contains("# iterations: 20"));
    assert!(column(&dec, "deconvolved_value").iter().all(|v| *v >= 0.0));
    let o = run(out, &["fit", out.join("deconvolved.csv").to_str().unwrap(), "--config", cfg, "--fix-scale", "270"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    assert_eq!(report["scale_held"], true);
    assert!(report["manifest_sha256"].as_str().unwrap().len() == 64);
}
