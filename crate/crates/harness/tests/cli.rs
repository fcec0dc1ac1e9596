//! Drives the `oafel` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
dataset = "quadratic"
T = 40
N = 3
s = 5
L_b = 4
eta = 0.05
gamma0 = 5.0
sigma0_sq = 1e-4
V = 0.01
e_n = 0.01
E_bar_round = 0.03
obs_error = 0.2
quad_samples_per_device = 16
quad_center_spread = 0.5
seeds = [1, 2]
"#;

fn oafel(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_oafel"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("OAFEL_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, CONFIG).unwrap();
    p.display().to_string()
}

fn run_ok(args: &[&str], threads: Option<&str>) {
    let out = oafel(args, threads);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_flag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = oafel(&["--config", &cfg, "--frobnicate", "3"], None);
    assert!(!out.status.success());
    let out = oafel(&["--config", &cfg, "--policy", "greedy"], None);
    assert!(!out.status.success());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = oafel(&["--config", missing.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, format!("{CONFIG}\nmystery = 1\n")).unwrap();
    let out = oafel(&["--config", bad.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));
}

#[test]
fn csv_layout_and_energy_totals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    run_ok(&["--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()], None);

    let text = fs::read_to_string(out.join("seed_7/metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 41);
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(&header[..7], ["t", "loss", "accuracy", "sigma_t", "k_star", "snr", "unified_energy"]);
    assert_eq!(&header[7..12], ["q_0", "E_est_0", "E_cp_0", "E_tr_0", "sched_0"]);
    assert_eq!(header.len(), 7 + 3 * 5);

    let mut totals = [0.0f64; 3];
    for (i, line) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], (i + 1).to_string());
        assert!(cells[2].is_empty(), "quadratic runs have no accuracy");
        for (n, total) in totals.iter_mut().enumerate() {
            let base = 7 + 5 * n;
            *total += cells[base + 2].parse::<f64>().unwrap() + cells[base + 3].parse::<f64>().unwrap();
            assert!(matches!(cells[base + 4], "0" | "1"));
        }
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("seed_7/summary.json")).unwrap()).unwrap();
    let spent: Vec<f64> = summary["energy_spent"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for (a, b) in spent.iter().zip(&totals) {
        assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}");
    }
    assert_eq!(summary["seed"], 7);
    assert!(out.join("aggregate.json").exists());
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["--config", &cfg, "--out", a.to_str().unwrap()], Some("1"));
    run_ok(&["--config", &cfg, "--out", b.to_str().unwrap()], Some("0"));
    for f in ["seed_1/metrics.csv", "seed_1/summary.json", "seed_2/metrics.csv", "seed_2/summary.json", "aggregate.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn overrides_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("o");
    run_ok(
        &[
            "--config", &cfg, "--seed", "3", "--policy", "all", "--rounds", "12", "--V", "2.5", "--gamma0", "1.0",
            "--obs-error", "0.0", "--out", out.to_str().unwrap(),
        ],
        None,
    );
    let text = fs::read_to_string(out.join("seed_3/metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 13);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("seed_3/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["policy"], "all");
    assert_eq!(summary["scheduled_fraction"].as_f64(), Some(1.0));
}
