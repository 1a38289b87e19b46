//! End-to-end tests of the `barynet` binary: exit codes, error naming,
//! output layout, overrides, and byte-level determinism across thread pools.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL_RUN: &str = r#"{
  "graph": {"kind": "complete", "m": 2},
  "problem": {
    "support": {"kind": "regular_1d", "n": 3, "lo": 0.0, "hi": 1.0},
    "measures": {"kind": "list", "measures": [
      {"kind": "finite", "atoms": [[0.0, 0.0]], "probs": [1.0]},
      {"kind": "finite", "atoms": [[1.0, 0.0]], "probs": [1.0]}
    ]},
    "epsilon": 0.4,
    "ln_omega": 1.0
  },
  "scheme": "a",
  "batches": "auto",
  "iterations": 40,
  "mode": "quantized",
  "record_stride": 1,
  "eval_samples": 32,
  "seed": 7
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_barynet"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn run_writes_outputs_and_is_deterministic_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "run.json", SMALL_RUN);

    let run = |out_name: &str, threads: &str| {
        let out_dir = dir.path().join(out_name);
        let output = bin()
            .args(["run", &config, "--out", out_dir.to_str().unwrap()])
            .env("RAYON_NUM_THREADS", threads)
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "run with {threads} threads failed: {}",
            stderr_of(&output)
        );
        out_dir
    };

    let a = run("wide", "4");
    let b = run("narrow", "1");

    for name in ["trajectory.csv", "barycenters.csv", "resolved_config.json"] {
        let left = fs::read(a.join(name)).unwrap();
        let right = fs::read(b.join(name)).unwrap();
        assert_eq!(left, right, "{name} differs across thread counts");
    }

    let trajectory = fs::read_to_string(a.join("trajectory.csv")).unwrap();
    let mut lines = trajectory.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,agent,samples,coords_sent,bits_sent,consensus_gap_w,consensus_gap_max,dual_estimate"
    );
    // 41 recorded rounds x (2 agent rows + 1 total row).
    assert_eq!(lines.count(), 41 * 3);
    let barycenters = fs::read_to_string(a.join("barycenters.csv")).unwrap();
    assert!(barycenters.starts_with("x,y,agent_0,agent_1,average"));
}

#[test]
fn seed_override_changes_the_trajectory() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "run.json", SMALL_RUN);
    let run = |out_name: &str, seed: Option<&str>| {
        let out_dir = dir.path().join(out_name);
        let mut cmd = bin();
        cmd.args(["run", &config, "--out", out_dir.to_str().unwrap()]);
        if let Some(seed) = seed {
            cmd.args(["--seed", seed]);
        }
        let output = cmd.output().unwrap();
        assert!(output.status.success(), "{}", stderr_of(&output));
        fs::read(out_dir.join("trajectory.csv")).unwrap()
    };
    let base = run("base", None);
    let same = run("same", Some("7"));
    let other = run("other", Some("99"));
    assert_eq!(base, same, "explicit seed equal to the config seed must not change anything");
    assert_ne!(base, other, "a different seed should change the sampled trajectory");
}

#[test]
fn iters_override_is_recorded_and_applied() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "run.json", SMALL_RUN);
    let out_dir = dir.path().join("short");
    let output = bin()
        .args(["run", &config, "--out", out_dir.to_str().unwrap(), "--iters", "7"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));

    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("resolved_config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["derived"]["iterations"], 7);

    let trajectory = fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    let last = trajectory.lines().last().unwrap();
    assert!(last.starts_with("7,total,"), "last recorded round should be 7, got: {last}");
}

#[test]
fn output_root_env_places_runs_under_config_stem() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "smoke.json", SMALL_RUN);
    let root = dir.path().join("results");
    let output = bin()
        .args(["run", &config])
        .env("BARYNET_OUT", root.to_str().unwrap())
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));
    assert!(root.join("smoke").join("trajectory.csv").exists());
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = TempDir::new().unwrap();
    let broken = SMALL_RUN.replacen("\"seed\": 7", "\"seed\": 7, \"bogus_knob\": 3", 1);
    let config = write_config(dir.path(), "broken.json", &broken);
    let output = bin().args(["run", &config]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let err = stderr_of(&output);
    assert!(err.contains("bogus_knob"), "stderr should name the unknown key: {err}");
}

#[test]
fn omega_of_one_is_rejected_by_name() {
    let dir = TempDir::new().unwrap();
    let broken = SMALL_RUN.replacen("\"ln_omega\": 1.0", "\"omega\": 1.0", 1);
    let config = write_config(dir.path(), "omega.json", &broken);
    let output = bin().args(["run", &config]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let err = stderr_of(&output);
    assert!(err.contains("omega"), "stderr should name the omega parameter: {err}");
}

#[test]
fn missing_config_file_is_an_io_error() {
    let output = bin().args(["run", "/nonexistent/nope.json"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn unknown_verify_suite_is_rejected() {
    let output = bin().args(["verify", "nonsense"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).contains("suite"));
}

#[test]
fn equivalence_suite_passes() {
    let output = bin().args(["verify", "equivalence"]).output().unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    let report = stdout_of(&output);
    assert!(report.contains("[PASS]"));
    assert!(!report.contains("[FAIL]"));
}

#[test]
fn graph_info_reports_derived_constants() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "run.json", SMALL_RUN);
    let output = bin().args(["graph-info", &config]).output().unwrap();
    assert!(output.status.success(), "{}", stderr_of(&output));
    let report = stdout_of(&output);
    for needle in ["lambda_max", "lambda_min_plus", "chi", "gamma", "lipschitz", "radius"] {
        assert!(report.contains(needle), "graph-info should mention {needle}:\n{report}");
    }
}
