//! End-to-end drive of the kdeflow binary: every verb once, plus the
//! exit-code contract (0 ok, 2 bad input, 4 completed-but-failed check)
//! and the artifact layout a run leaves behind.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kdeflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdeflow"))
        .args(args)
        .output()
        .expect("spawn kdeflow")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process was signaled")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

fn stderr_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_RUN: &str = r#"{
    "domain": {"shape": "box", "bounds": [[0.0, 1.0]]},
    "kernel": {"family": "epanechnikov"},
    "energy": {"f": {"family": "entropy"}},
    "initial": {"type": "uniform", "bounds": [[0.0, 1.0]]},
    "seed": 11,
    "tau": 0.2,
    "horizon": 0.4,
    "schedule": {"mode": "explicit", "n": 16, "h": 0.15},
    "export_pitch": 0.05
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn run_writes_the_full_artifact_set_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", TINY_RUN);
    let out_dir = dir.path().join("out");

    let out = kdeflow(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));

    let summary = stdout_json(&out);
    assert_eq!(summary["steps_run"], 2);
    assert_eq!(summary["sane"], true);

    for name in ["resolved_config.json", "trajectory.jsonl", "diagnostics.csv", "summary.json"] {
        assert!(out_dir.join(name).is_file(), "missing artifact {name}");
    }
    assert!(out_dir.join("particles_00000.csv").is_file());
    assert!(out_dir.join("density_00000.csv").is_file());
    assert!(out_dir.join("particles_00002.csv").is_file(), "final snapshot missing");
    assert!(!out_dir.join("FAILED").exists());
}

#[test]
fn run_with_plot_renders_the_charts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", TINY_RUN);
    let out_dir = dir.path().join("out");

    let out = kdeflow(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--plot",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    for name in ["energy_curve.svg", "moment_curve.svg", "density_frames.svg"] {
        let path = out_dir.join(name);
        assert!(path.is_file(), "missing chart {name}");
        let body = fs::read_to_string(path).unwrap();
        assert!(body.starts_with("<svg"), "{name} is not an SVG document");
    }
}

#[test]
fn plot_verb_renders_from_a_finished_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", TINY_RUN);
    let out_dir = dir.path().join("out");
    let run = kdeflow(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&run), 0);

    let out = kdeflow(&["plot", "--run-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let listing = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(listing.contains("energy_curve.svg"), "plot verb listed: {listing}");
    assert!(out_dir.join("energy_curve.svg").is_file());
}

#[test]
fn bad_inputs_exit_two_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();

    let missing = kdeflow(&["run", "--config", "/nonexistent/run.json"]);
    assert_eq!(code(&missing), 2);
    assert!(stderr_text(&missing).starts_with("error:"));

    let mangled = write_config(dir.path(), "mangled.json", "{ this is not json");
    let out = kdeflow(&["run", "--config", &mangled]);
    assert_eq!(code(&out), 2);

    let misspelled = TINY_RUN.replace("\"schedule\"", "\"schedul\"");
    let cfg = write_config(dir.path(), "misspelled.json", &misspelled);
    let out = kdeflow(&["run", "--config", &cfg]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr_text(&out).contains("schedul"),
        "unknown-field diagnostic should name the field: {}",
        stderr_text(&out)
    );
}

#[test]
fn default_schedule_too_steep_to_run_points_at_explicit_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "default.json",
        r#"{
            "domain": {"shape": "box", "bounds": [[0.0, 1.0]]},
            "kernel": {"family": "epanechnikov"},
            "energy": {"f": {"family": "entropy"}},
            "initial": {"type": "uniform", "bounds": [[0.0, 1.0]]},
            "seed": 1,
            "tau": 0.05,
            "horizon": 0.2,
            "schedule": {"mode": "default"}
        }"#,
    );
    let out = kdeflow(&["run", "--config", &cfg]);
    assert_eq!(code(&out), 2);
    let msg = stderr_text(&out);
    assert!(msg.contains("explicit"), "no pointer to explicit mode in: {msg}");
}

#[test]
fn schedule_checks_split_default_from_thin_ladders() {
    let dir = tempfile::tempdir().unwrap();

    let ok = write_config(
        dir.path(),
        "defaults.json",
        r#"{
            "law": {"family": "entropy"},
            "kernel": {"family": "epanechnikov"},
            "d": 1,
            "taus": [0.2, 0.1, 0.05, 0.025]
        }"#,
    );
    let out = kdeflow(&["check-schedule", "--request", &ok]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    assert_eq!(stdout_json(&out)["pass"], true);

    let points: Vec<String> = [0.2f64, 0.1, 0.05, 0.025]
        .iter()
        .map(|&tau| {
            let n = (1.0 / tau).ceil();
            format!(
                r#"{{"tau": {tau}, "n": {n}, "h": {}, "gamma": {}}}"#,
                n.powf(-0.25),
                tau.powf(1.5)
            )
        })
        .collect();
    let thin = write_config(
        dir.path(),
        "thin.json",
        &format!(
            r#"{{
                "law": {{"family": "entropy"}},
                "kernel": {{"family": "epanechnikov"}},
                "d": 1,
                "points": [{}]
            }}"#,
            points.join(",")
        ),
    );
    let out = kdeflow(&["check-schedule", "--request", &thin]);
    assert_eq!(code(&out), 4, "thin ladder must fail the check");
    let report = stdout_json(&out);
    assert_eq!(report["pass"], false);
    let noise = report["conditions"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "noise_decay")
        .expect("noise_decay condition in the report");
    assert_eq!(noise["passed"], false);
}

#[test]
fn oracle_step_verb_certifies_a_toy_instance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "toy.json",
        r#"{
            "domain": {"shape": "box", "bounds": [[0.0, 0.15]]},
            "kernel": {"family": "epanechnikov"},
            "energy": {"f": {"family": "entropy"}},
            "initial": {"type": "uniform", "bounds": [[0.0, 0.15]]},
            "seed": 7002,
            "tau": 0.4,
            "horizon": 0.4,
            "schedule": {"mode": "explicit", "n": 2, "h": 0.85, "omega": 0.0230769}
        }"#,
    );
    let out = kdeflow(&["oracle-step", "--config", &cfg]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let report = stdout_json(&out);
    assert_eq!(report["within_budget"], true);
    assert!(report["excess"].as_f64().unwrap() <= report["gamma"].as_f64().unwrap());
}

#[test]
fn bound_check_verb_holds_on_sampled_configurations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bounds.json",
        r#"{
            "domain": {"shape": "box", "bounds": [[-1.0, 1.0]]},
            "kernel": {"family": "epanechnikov"},
            "energy": {
                "f": {"family": "entropy"},
                "v": {"kind": "quadratic", "center": [0.0], "coeff": 1.0},
                "w": {"kind": "quadratic", "coeff": 0.5}
            },
            "initial": {"type": "uniform", "bounds": [[-1.0, 1.0]]},
            "seed": 5,
            "tau": 0.1,
            "horizon": 0.2,
            "schedule": {"mode": "explicit", "n": 16, "h": 0.12}
        }"#,
    );
    let out = kdeflow(&["bound-check", "--config", &cfg, "--cases", "25", "--seed", "5"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let report = stdout_json(&out);
    assert_eq!(report["all_hold"], true);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&kdeflow(&[])), 2);
    assert_eq!(code(&kdeflow(&["frobnicate"])), 2);
    assert_eq!(code(&kdeflow(&["run"])), 2, "run without --config must be a usage error");
    assert_eq!(code(&kdeflow(&["run", "--config", "x.json", "--bogus"])), 2);
}

#[test]
fn version_flag_prints_the_crate_version() {
    let out = kdeflow(&["--version"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains(env!("CARGO_PKG_VERSION")),
        "version output: {text}"
    );
}
