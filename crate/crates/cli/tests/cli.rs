use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use etrm_core::runner::{RunStatus, RunSummary};

fn etrm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etrm"))
        .args(args)
        .env_remove("ETRM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn shipped(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

const QUICK: &str = r#"
schema_version = 1
case = "case1"

[schedule]
tf_target = 8.0
tf_steps = 2
eps_target = 0.01
eps_steps = 2

[output]
resolution = 401
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn validate_accepts_shipped_configs() {
    for case in ["case1", "case2", "case3"] {
        let out = etrm(&["validate", "--config", &shipped(&format!("{case}.toml"))]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        assert!(String::from_utf8_lossy(&out.stdout).contains(case));
    }
}

#[test]
fn invalid_configs_exit_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(shipped("case2.toml")).unwrap();
    for (from, to, key) in [
        ("tf = 50.0", "tf = 0.0", "boundary.tf"),
        ("m = 200000.0", "m = -1.0", "model.m"),
        ("eps_target = 0.001", "eps_target = 0.5", "schedule"),
    ] {
        let cfg = write_config(dir.path(), "bad.toml", &base.replace(from, to));
        let out_dir = dir.path().to_string_lossy();
        for args in [
            vec!["validate", "--config", &cfg],
            vec!["run", "--config", &cfg, "--out-dir", &out_dir],
        ] {
            let verb = args[0];
            let out = etrm(&args);
            assert_eq!(out.status.code(), Some(1), "{verb} {key}");
            assert!(
                stderr(&out).contains(&format!("`{key}`")),
                "{verb}: {}",
                stderr(&out)
            );
        }
    }
}

#[test]
fn parse_errors_report_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "broken.toml", "schema_version = 1\ncase = \n");
    let out = etrm(&["validate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2, column"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(etrm(&["run"]).status.code(), Some(1));
    assert_eq!(
        etrm(&["run", "--case", "case1", "--config", "x.toml"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(etrm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(etrm(&["--help"]).status.code(), Some(0));
}

#[test]
fn run_writes_csv_and_round_trippable_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.toml", QUICK);
    let out_dir = dir.path().join("out");
    let out = etrm(&[
        "run",
        "--config",
        &cfg,
        "--out-dir",
        &out_dir.to_string_lossy(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let json = fs::read_to_string(out_dir.join("case1_summary.json")).unwrap();
    let summary: RunSummary = serde_json::from_str(&json).unwrap();
    assert_eq!(summary.status, RunStatus::Converged);
    assert_eq!(serde_json::to_string_pretty(&summary).unwrap(), json);
    assert_eq!(summary.final_epsilon, Some(0.01));

    let csv = fs::read_to_string(out_dir.join("case1_trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,x1,x2,x3,lam1,lam2,lam3,u,u_trig,H1,H,E_cum\n"));
    assert_eq!(csv.lines().count(), 402);
    let last_energy: f64 = csv
        .lines()
        .last()
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(last_energy, summary.energy_j.unwrap());
}

#[test]
fn repeated_runs_give_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.toml", QUICK);
    let mut files = Vec::new();
    for sub in ["a", "b"] {
        let out_dir = dir.path().join(sub);
        let out = etrm(&[
            "run",
            "--config",
            &cfg,
            "--out-dir",
            &out_dir.to_string_lossy(),
            "--format",
            "csv",
        ]);
        assert_eq!(out.status.code(), Some(0));
        assert!(!out_dir.join("case1_summary.json").exists());
        files.push(fs::read(out_dir.join("case1_trajectory.csv")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.toml", QUICK);
    let out = Command::new(env!("CARGO_BIN_EXE_etrm"))
        .args(["run", "--config", &cfg, "--format", "json"])
        .env("ETRM_OUT_DIR", dir.path().join("env"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(dir.path().join("env/case1_summary.json").exists());
}

#[test]
fn solver_failure_exits_two_with_trace() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{QUICK}\n[solver]\nmax_newton = 1\nmax_mesh = 25\n");
    let cfg = write_config(dir.path(), "starved.toml", &body);
    let out = etrm(&[
        "run",
        "--config",
        &cfg,
        "--out-dir",
        &dir.path().to_string_lossy(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let summary: RunSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join("case1_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary.status, RunStatus::SolverFailed);
    assert!(!summary.trace.records.is_empty());
    assert!(summary.error.is_some());
}

#[test]
fn sweep_writes_epsilon_energy_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.toml", QUICK);
    let out = etrm(&[
        "sweep-epsilon",
        "--config",
        &cfg,
        "--epsilons",
        "0.1,0.03,0.01",
        "--jobs",
        "2",
        "--out-dir",
        &dir.path().to_string_lossy(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("case1_sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epsilon,energy_J"));
    let eps: Vec<f64> = lines
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(eps, vec![0.1, 0.03, 0.01]);

    let bad = etrm(&["sweep-epsilon", "--config", &cfg, "--epsilons", "0.01,0.03"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("`epsilons`"));
}
