use std::path::Path;
use std::process::{Command, Output};

fn scbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scbf")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const SMALL: &str = r#"{"n_agents": 3, "horizon": 0.2, "dt": 0.01, "replicates": 2}"#;

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{"n_agents": 3, "colour": "red"}"#);
    let out = scbf(&["campaign", "--config", &cfg, "-d", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_values_and_missing_files_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "neg.json", r#"{"dt": -1.0}"#);
    let out_dir = dir.path().join("out");
    let out_dir = out_dir.to_str().unwrap();
    assert_eq!(scbf(&["campaign", "--config", &cfg, "-d", out_dir]).status.code(), Some(2));
    let missing = dir.path().join("nope.json");
    let missing = missing.to_str().unwrap();
    assert_eq!(scbf(&["campaign", "--config", missing, "-d", out_dir]).status.code(), Some(2));
    assert_eq!(scbf(&["check", "--scale", "0"]).status.code(), Some(2));
}

#[test]
fn check_passes_at_small_scale() {
    let out = scbf(&["check", "--scale", "0.05", "--seed", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn campaign_writes_report_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let out_dir = dir.path().join("out");
    let out = scbf(&["campaign", "--config", &cfg, "-d", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["n_agents"], 3);
    assert!(summary["wallclock_s"].is_null());
    assert!(!out_dir.join("series.csv").exists());
}

#[test]
fn wallclock_only_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let out_dir = dir.path().join("out");
    let out = scbf(&["campaign", "--config", &cfg, "-d", out_dir.to_str().unwrap(), "--wallclock"]);
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["wallclock_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn simulate_writes_one_row_per_agent_and_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL);
    let traj = dir.path().join("traj.csv");
    let out = scbf(&["simulate", "--config", &cfg, "--replicate", "1", "--out", traj.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(traj).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,replicate,agent,px,py,vx,vy,ux,uy,h_min,feasible"));
    assert_eq!(lines.count(), 20 * 3);
}

#[test]
fn repeated_campaigns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "est.json",
        r#"{"n_agents": 4, "horizon": 0.5, "dt": 0.005, "replicates": 3, "mode": "simplified_cbf"}"#,
    );
    let dirs: Vec<_> = ["a", "b"].iter().map(|t| dir.path().join(t)).collect();
    for d in &dirs {
        assert!(scbf(&["campaign", "--config", &cfg, "-d", d.to_str().unwrap(), "--series"]).status.success());
    }
    for file in ["report.csv", "summary.json", "series.csv"] {
        assert_eq!(
            std::fs::read(dirs[0].join(file)).unwrap(),
            std::fs::read(dirs[1].join(file)).unwrap(),
            "{file} differs"
        );
    }
}
