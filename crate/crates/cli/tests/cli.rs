//! End-to-end checks of the batch front-end: artifacts, determinism, exit
//! codes, and the shipped example problems.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

fn mflq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mflq"))
        .current_dir(workspace_root())
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_csv_value(path: &Path, prefix: &str) -> f64 {
    let text = std::fs::read_to_string(path).unwrap();
    let line = text
        .lines()
        .find(|l| l.starts_with(prefix))
        .unwrap_or_else(|| panic!("no `{prefix}` row in {}", path.display()));
    line.rsplit(',').next().unwrap().parse().unwrap()
}

#[test]
fn solve_reproduces_tanh_in_value_table() {
    let out = tempdir("solve_tanh");
    let res = mflq(&[
        "--command",
        "solve",
        "--problem",
        "problems/scalar_tanh.json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let p0 = read_csv_value(&out.join("value.csv"), "P2,0,0,0");
    assert!((p0 - 1.0_f64.tanh()).abs() < 1e-8, "P(0) = {p0}");
    let v = read_csv_value(&out.join("value.csv"), "V,0,0,0");
    assert!((v - 0.5 * 1.0_f64.tanh()).abs() < 1e-8, "V = {v}");
    for artifact in ["riccati.csv", "eta.csv", "regularity.txt"] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }
}

#[test]
fn malformed_problem_exits_2_with_location() {
    let dir = tempdir("bad_file");
    let bad = dir.join("bad.json");
    std::fs::write(&bad, "{\n  \"dims\": nope\n}").unwrap();
    let res = mflq(&[
        "--command",
        "solve",
        "--problem",
        bad.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("ParseError"), "{err}");
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let args_for = |out: &Path| {
        vec![
            "--command".to_string(),
            "solve".to_string(),
            "--problem".to_string(),
            "problems/two_regime.json".to_string(),
            "--grid".to_string(),
            "300".to_string(),
            "--out".to_string(),
            out.to_str().unwrap().to_string(),
        ]
    };
    let out_a = tempdir("det_a");
    let out_b = tempdir("det_b");
    for out in [&out_a, &out_b] {
        let args: Vec<String> = args_for(out);
        let argrefs: Vec<&str> = args.iter().map(String::as_str).collect();
        let res = mflq(&argrefs);
        assert!(res.status.success());
    }
    for artifact in ["riccati.csv", "eta.csv", "value.csv"] {
        let a = std::fs::read(out_a.join(artifact)).unwrap();
        let b = std::fs::read(out_b.join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} differs between identical runs");
    }
}

#[test]
fn simulate_is_seed_deterministic() {
    let run = |out: &Path| {
        let res = mflq(&[
            "--command",
            "simulate",
            "--problem",
            "problems/two_regime.json",
            "--grid",
            "300",
            "--paths",
            "50",
            "--w-paths",
            "4",
            "--dt-sim",
            "0.01",
            "--seed",
            "123",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        std::fs::read(out.join("mc_report.csv")).unwrap()
    };
    let a = run(&tempdir("sim_a"));
    let b = run(&tempdir("sim_b"));
    assert_eq!(a, b, "mc_report.csv differs for identical seeds");
}

#[test]
fn tree_check_emits_oracle_report() {
    let out = tempdir("tree_check");
    let res = mflq(&[
        "--command",
        "tree-check",
        "--problem",
        "problems/two_regime.json",
        "--grid",
        "200",
        "--tree-depth",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report = std::fs::read_to_string(out.join("oracle_report.txt")).unwrap();
    for key in [
        "J_star",
        "grad_norm",
        "stationarity_residual",
        "decoupling_error",
        "projection_idempotence",
        "conditioning_consistency",
        "cost_form_gap",
    ] {
        assert!(report.contains(key), "report missing {key}:\n{report}");
    }
}

#[test]
fn iterate_reports_monotone_steps() {
    let out = tempdir("iterate");
    let res = mflq(&[
        "--command",
        "iterate",
        "--problem",
        "problems/two_regime.json",
        "--grid",
        "300",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(out.join("iterate.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert!(rows.len() >= 2, "expected several iterations:\n{csv}");
    for row in &rows[1..] {
        assert!(row.ends_with("true"), "monotonicity flag not set: {row}");
    }
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("converged"), "{stdout}");
}

/// The shipped example files pass validation and the full acceptance suite.
#[test]
fn shipped_problems_pass_verify_all() {
    let res = mflq(&[
        "--command",
        "verify-all",
        "--problem",
        "problems/two_regime.json",
        "--grid",
        "400",
    ]);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(res.status.success(), "{stdout}");
    assert!(stdout.contains("verify-all: PASS"), "{stdout}");
    assert!(!stdout.contains("FAIL —"), "{stdout}");
    // the scalar file at least validates and solves
    let out = tempdir("verify_tanh");
    let res = mflq(&[
        "--command",
        "solve",
        "--problem",
        "problems/scalar_tanh.json",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mflq_cli_test_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
