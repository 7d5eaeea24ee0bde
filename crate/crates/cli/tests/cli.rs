use std::path::Path;
use std::process::Command;

fn mabench(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_mabench")).args(args).env("RUST_LOG", "warn").output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/emulated.toml").display().to_string()
}

#[test]
fn emulate_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.jsonl");
    let report = dir.path().join("report");
    let (log_s, report_s) = (log.to_str().unwrap(), report.to_str().unwrap());
    let out = mabench(&["emulate-run", "--config", &config(), "--output", log_s, "--links", "op1,op2"]);
    assert!(out.contains("120 rounds, 720 records"), "{out}");
    let out = mabench(&["analyze", log_s, "--out", report_s]);
    assert!(out.contains("720 records"), "{out}");
    let table = std::fs::read_to_string(report.join("availability_table_small.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn fit_prints_a_profile() {
    let out = mabench(&["fit", "--id", "x", "--median", "0.1", "--q90", "0.3", "--success-rate", "0.97"]);
    let v: toml::Value = toml::from_str(&out).unwrap();
    assert_eq!(v["link_id"].as_str(), Some("x"));
}

#[test]
fn unknown_link_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_mabench"))
        .args(["emulate-run", "--config", &config(), "--links", "nope"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
