use std::fs;

use loadgen::bundle::{bundle_dir, run_log_name, SUMMARY_FILE};
use loadgen::cli::dispatch;
use loadgen_core::ScenarioKind;
use serde_json::Value;

fn run(args: &[&str]) -> (i32, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = dispatch(
        std::iter::once("loadgen").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (
        code,
        String::from_utf8_lossy(&out).into_owned() + &String::from_utf8_lossy(&err),
    )
}

#[test]
fn plan_server_defaults() {
    let (code, text) = run(&["plan", "--scenario", "server"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("rounded_query_count    270336"), "{text}");
    let (code, text) = run(&["plan", "--scenario", "server", "--json"]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["plan"]["effective_min_queries"], 270336);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["bogus"]).0, 2);
    assert_eq!(run(&["plan", "--scenario", "nope"]).0, 2);
    assert_eq!(
        run(&["run", "--sut", "tcp:127.0.0.1:9", "--virtual-time"]).0,
        2
    );
    assert_eq!(run(&["plan", "--confidence", "1.5"]).0, 2);
}

#[test]
fn offline_run_check_and_tamper() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let (code, text) = run(&[
        "run",
        "--scenario",
        "offline",
        "--sut",
        "sim:batch:100us,0ms",
        "--virtual-time",
        "--out",
        out,
    ]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("valid       true"), "{text}");
    let dir = bundle_dir(tmp.path(), "sim-batch", ScenarioKind::Offline);
    let d = dir.to_str().unwrap();
    let (code, text) = run(&["check", d]);
    assert_eq!(code, 0, "{text}");
    assert!(text.starts_with("PASS"), "{text}");

    let (code, text) = run(&["check", "--json", d]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["violations"].as_array().unwrap().len(), 0);

    let (code, text) = run(&["replay", dir.join(run_log_name(0)).to_str().unwrap()]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("matches   true"), "{text}");

    let summary = fs::read_to_string(dir.join(SUMMARY_FILE)).unwrap();
    fs::write(
        dir.join(SUMMARY_FILE),
        summary.replace("\"valid\": true", "\"valid\": false"),
    )
    .unwrap();
    let (code, text) = run(&["check", d]);
    assert_eq!(code, 1, "{text}");
    assert!(text.contains("[manifest_mismatch] summary.json"), "{text}");
}

#[test]
fn invalid_run_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let (code, text) = run(&[
        "run",
        "--scenario",
        "multi_stream",
        "--sut",
        "sim:constant:60ms",
        "--virtual-time",
        "--out",
        out,
    ]);
    assert_eq!(code, 1, "{text}");
    assert!(text.contains("valid       false"), "{text}");
}

#[test]
fn comply_catches_seed_cheat() {
    let (code, text) = run(&[
        "comply",
        "--scenario",
        "single_stream",
        "--sut",
        "sim:seedcheat:1ms",
        "--virtual-time",
    ]);
    assert_eq!(code, 1, "{text}");
    assert!(text.contains("seed_variants        FAIL"), "{text}");
    let (code, text) = run(&[
        "comply",
        "--scenario",
        "single_stream",
        "--sut",
        "sim:constant:1ms",
        "--virtual-time",
    ]);
    assert_eq!(code, 0, "{text}");
}

#[test]
fn config_file_and_flags_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"scenario":"server","settings":{"target_qps":2000.0}}"#,
    )
    .unwrap();
    let (code, text) = run(&["plan", "--config", cfg.to_str().unwrap(), "--json"]);
    assert_eq!(code, 0, "{text}");
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["settings"]["target_qps"], 2000.0);
    let (_, text) = run(&[
        "plan",
        "--config",
        cfg.to_str().unwrap(),
        "--target-qps",
        "300",
        "--json",
    ]);
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["settings"]["target_qps"], 300.0);
}
