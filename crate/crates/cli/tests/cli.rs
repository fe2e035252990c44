use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn pushforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pushforge")).args(args).output().expect("spawn pushforge")
}

fn run_ok(stage: &str, out: &Path, extra: &[&str]) -> Vec<Value> {
    let config = fixture("e2e.json");
    let mut args = vec![stage, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = pushforge(&args);
    assert!(o.status.success(), "{stage} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("summary line is JSON"))
        .collect()
}

#[test]
fn distill_on_fixture_reports_count() {
    let dir = tempfile::tempdir().unwrap();
    let summary = &run_ok("distill", dir.path(), &[])[0];
    assert_eq!(summary["stage"], "distill");
    assert_eq!(summary["records"], 120);
    let n = summary["weighted_samples"].as_u64().unwrap();
    assert!(n > 0 && n < 120);
    let written = std::fs::read_to_string(dir.path().join("weighted_samples.jsonl")).unwrap();
    assert_eq!(written.lines().count() as u64, n);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(pushforge(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(pushforge(&["distill", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(pushforge(&[]).status.code(), Some(2));
}

#[test]
fn missing_config_exits_1_naming_the_path() {
    let o = pushforge(&["distill", "--config", "/nonexistent/run.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/run.json"));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    // classify without a prior distill has no input
    let config = fixture("e2e.json");
    let o = pushforge(&["classify", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = pushforge(&[
        "distill",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "distill.q=0.7",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stages_chain_one_by_one() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["distill", "classify", "export-sft", "generate", "pairs", "train-rm", "eval-rm", "select"] {
        let s = &run_ok(stage, dir.path(), &[])[0];
        assert_eq!(s["stage"], stage);
        for f in s["files"].as_array().unwrap() {
            assert!(Path::new(f.as_str().unwrap()).exists(), "{stage} did not write {f}");
        }
    }
    let s = &run_ok("analyze", dir.path(), &["--set", "analytics.format=json"])[0];
    for name in ["accuracy_table.json", "increment_curve.json", "style_distribution.json"] {
        let v: Value = serde_json::from_slice(&std::fs::read(dir.path().join(name)).unwrap()).unwrap();
        assert!(v.is_object());
    }
    assert!(s["base_share"].as_f64().is_some());

    let decisions = std::fs::read_to_string(dir.path().join("decisions.jsonl")).unwrap();
    for line in decisions.lines() {
        let d: Value = serde_json::from_str(line).unwrap();
        match d["decision"].as_str().unwrap() {
            "Replace" => assert!(d["win_probability"].as_f64().unwrap() > 0.5),
            "KeepBase" => assert_eq!(d["chosen_category"], "Base"),
            other => panic!("unexpected decision {other}"),
        }
    }
}

#[test]
fn seed_flag_changes_stochastic_stages() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_ok("pairs", a.path(), &["--seed", "1"]);
    run_ok("pairs", b.path(), &["--seed", "2"]);
    let read = |d: &Path| std::fs::read(d.join("pairs_eval.jsonl")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}
