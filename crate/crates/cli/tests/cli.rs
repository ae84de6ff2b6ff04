use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semsense::pipeline::selftest;

fn semsense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semsense"))
        .args(args)
        .env_remove("SEMSENSE_CONFIG")
        .env_remove("SEMSENSE_BACKEND_URL")
        .output()
        .expect("spawn semsense")
}

fn fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = selftest::write_fixture(dir.path()).unwrap();
    (dir, config)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr_kind(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    let v: serde_json::Value = serde_json::from_str(line).unwrap_or_else(|_| panic!("not json: {text}"));
    assert!(v["error"].is_string());
    v["kind"].as_str().unwrap().to_string()
}

fn run_all(config: &Path) {
    let out = semsense(&["--config", config.to_str().unwrap(), "run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = semsense(&["selftest", "--dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("selftest: ok"));
}

#[test]
fn missing_config_is_usage_error() {
    let out = semsense(&["ingest"]);
    assert_eq!(code(&out), 1);
    assert_eq!(stderr_kind(&out), "usage");

    let out = semsense(&["--config", "/nonexistent/semsense.toml", "ingest"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn unknown_flag_and_help() {
    assert_eq!(code(&semsense(&["--bogus"])), 1);
    assert_eq!(code(&semsense(&["--help"])), 0);
}

#[test]
fn malformed_backend_url_is_usage_error() {
    let (_dir, config) = fixture();
    let c = config.to_str().unwrap();
    assert_eq!(code(&semsense(&["--config", c, "--backend-url", "nli", "ingest"])), 1);
    assert_eq!(code(&semsense(&["--config", c, "--backend-url", "vision=http://x", "ingest"])), 1);
}

#[test]
fn stage_without_predecessor_fails() {
    let (dir, config) = fixture();
    let out = semsense(&["--config", config.to_str().unwrap(), "generate"]);
    assert_eq!(code(&out), 2);
    assert_eq!(stderr_kind(&out), "missing_input");
    assert!(dir.path().join("out/generate.incomplete").exists());
}

#[test]
fn dry_run_writes_nothing() {
    let (dir, config) = fixture();
    let out = semsense(&["--config", config.to_str().unwrap(), "--dry-run", "run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("out").exists());
    assert!(!dir.path().join("cache").exists());
}

#[test]
fn stages_individually_match_full_run_and_report_reruns_identically() {
    let (dir, config) = fixture();
    let c = config.to_str().unwrap();
    for stage in ["ingest", "filter", "generate", "evaluate", "analyze", "report"] {
        let out = semsense(&["--config", c, stage]);
        assert_eq!(code(&out), 0, "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let report = std::fs::read(dir.path().join("out/report.json")).unwrap();
    assert_eq!(report, selftest::GOLDEN_REPORT_JSON.as_bytes());

    let out = semsense(&["--config", c, "run", "--stage", "report"]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(dir.path().join("out/report.json")).unwrap(), report);

    let out = semsense(&["--config", c, "run", "--stage", "nope"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn tampered_rates_are_a_consistency_failure() {
    let (dir, config) = fixture();
    run_all(&config);
    let rates = dir.path().join("out/rates.jsonl");
    let text = std::fs::read_to_string(&rates).unwrap();
    let mut rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let n = rows[0]["overall"]["strict_count"].as_u64().unwrap();
    rows[0]["overall"]["strict_count"] = serde_json::json!(n + 1);
    let tampered: String = rows.iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(&rates, tampered).unwrap();

    let out = semsense(&["--config", config.to_str().unwrap(), "report"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stderr_kind(&out), "consistency");
}

#[test]
fn annotation_export_and_kappa() {
    let (dir, config) = fixture();
    run_all(&config);
    let c = config.to_str().unwrap();
    let csv_path = dir.path().join("judgments.csv");
    let out = semsense(&["--config", c, "annotate", "export", "--output", csv_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("task_id,annotator,equivalent"));

    // No judgments yet: the two annotators do not overlap.
    let out = semsense(&["--config", c, "annotate", "kappa"]);
    assert_eq!(code(&out), 2);
}
