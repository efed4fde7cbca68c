//! End-to-end runs of the `neumann-ra` binary.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neumann_ra::design_matrix::{normalize, read_covariates_csv};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neumann-ra"));
    c.env_remove("NEUMANN_RA_WEIGHTS_CACHE");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Data lines of a CSV, comment lines dropped.
fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn version_flag() {
    let o = run(&["--version"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("neumann-ra "));
}

#[test]
fn oracle_check_on_fixture_passes() {
    let design = fixture("design_n8.csv");
    let o = run(&["oracle-check", "--design", design.to_str().unwrap(), "--max-d", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("n,m,d,max_weight_dev,scalar_dev,status"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn degree_zero_weights_match_closed_form() {
    let path = fixture("design_n60.csv");
    let design = normalize(&read_covariates_csv(&path).unwrap()).unwrap();
    let m = 18;
    let o = run(&["weights", "--design", path.to_str().unwrap(), "--d", "1", "--m", "18"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines = data_lines(&text);
    assert_eq!(lines[0], "unit,xi_d0,xi_d1");
    let expected = common::degree_zero_closed_form(&design, m);
    assert_eq!(lines.len() - 1, expected.len());
    for (line, e) in lines[1..].iter().zip(&expected) {
        let xi0: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((xi0 - e).abs() <= 1e-10 * e.abs().max(1.0), "{xi0} vs {e}");
    }
}

#[test]
fn estimate_prints_all_methods() {
    let o = run(&[
        "estimate",
        "--design",
        fixture("design_n60.csv").to_str().unwrap(),
        "--data",
        fixture("observed_n60.csv").to_str().unwrap(),
        "--d",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let methods: Vec<&str> = data_lines(&text)[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["dim", "ols", "neumann_d0", "neumann_d1"]);
}

#[test]
fn usage_error_exits_two() {
    let o = run(&["weights", "--d", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_file_exits_one_with_kind() {
    let o = run(&["weights", "--design", "/nonexistent/x.csv", "--d", "0", "--m", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).lines().any(|l| l.starts_with("error: kind=")), "{}", stderr(&o));
}

fn simulate(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "simulate".to_string(),
        "--config".into(),
        fixture("minimal.toml").to_str().unwrap().into(),
        "--out-dir".into(),
        out.to_str().unwrap().into(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    bin().args(&args).output().unwrap()
}

#[test]
fn simulate_writes_expected_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate(dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let est = fs::read_to_string(dir.path().join("estimates.csv")).unwrap();
    let est_lines = data_lines(&est);
    assert_eq!(est_lines[0], "replicate,gamma,assignment_id,method,estimate");
    // R=2, three gammas, N=50, four methods
    assert_eq!(est_lines.len() - 1, 2 * 3 * 50 * 4);

    let met = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let met_lines = data_lines(&met);
    assert_eq!(met_lines[0], "gamma,method,stat,median,q10,q90");
    for line in &met_lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 6);
        assert!(neumann_ra::simulation::STATS.contains(&f[2]), "{line}");
        let (med, lo, hi): (f64, f64, f64) = (f[3].parse().unwrap(), f[4].parse().unwrap(), f[5].parse().unwrap());
        assert!(lo <= med && med <= hi);
    }
    assert_eq!(met_lines.len() - 1, 3 * 4 * 3);
}

#[test]
fn thread_count_does_not_change_output() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(simulate(a.path(), &["--threads", "1"]).status.success());
    assert!(simulate(b.path(), &["--threads", "2"]).status.success());
    for f in ["estimates.csv", "metrics.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_reproduces_output() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate(dir.path(), &[]).status.success());
    let before = fs::read(dir.path().join("estimates.csv")).unwrap();
    let metrics_before = fs::read(dir.path().join("metrics.csv")).unwrap();
    fs::remove_file(dir.path().join("partial/replicate_00001.estimates.csv")).unwrap();
    fs::remove_file(dir.path().join("partial/replicate_00001.metrics.csv")).unwrap();
    assert!(simulate(dir.path(), &[]).status.success());
    assert_eq!(before, fs::read(dir.path().join("estimates.csv")).unwrap());
    assert_eq!(metrics_before, fs::read(dir.path().join("metrics.csv")).unwrap());
}

#[test]
fn weights_cache_env_is_honoured() {
    let cache = tempfile::tempdir().unwrap();
    let design = fixture("design_n60.csv");
    let args = ["weights", "--design", design.to_str().unwrap(), "--d", "1", "--m", "20"];
    let first = bin().env("NEUMANN_RA_WEIGHTS_CACHE", cache.path()).args(args).output().unwrap();
    assert!(first.status.success(), "{}", stderr(&first));
    let files: Vec<_> = fs::read_dir(cache.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(!files.is_empty());
    assert!(files.iter().all(|f| f.to_string_lossy().ends_with(".bin")));
    let second = bin().env("NEUMANN_RA_WEIGHTS_CACHE", cache.path()).args(args).output().unwrap();
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn envelope_report_is_key_value() {
    let o = run(&["envelope", "--design", fixture("design_n60.csv").to_str().unwrap(), "--m", "18"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for key in ["alpha_env=", "status="] {
        assert!(out.contains(key), "{out}");
    }
}
