use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn crowdloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&crowdloc(&["--help"])), 0);
    assert_eq!(code(&crowdloc(&["--version"])), 0);
    assert_eq!(code(&crowdloc(&["simulate", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&crowdloc(&[])), 1);
    assert_eq!(code(&crowdloc(&["no-such-command"])), 1);
    assert_eq!(code(&crowdloc(&["simulate", "--steps", "many"])), 1);
    assert_eq!(code(&crowdloc(&["grad-check", "--cells", "0"])), 1);
    let out = crowdloc(&["evaluate", "--preds", "a.csv", "--gts", "a.json", "--sigma", "wide"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn missing_and_malformed_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = crowdloc(&["match-demo", "--candidates", "/nonexistent/c.csv", "--gts", "/nonexistent/g.json", "--out", s(&path(dir.path(), "m.json"))]);
    assert_eq!(code(&out), 2);

    let bad = path(dir.path(), "bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = crowdloc(&["learn-priors", "--annotations", s(&bad), "--out", s(&path(dir.path(), "p.json"))]);
    assert_eq!(code(&out), 2);
    assert!(!path(dir.path(), "p.json").exists());
}

#[test]
fn failed_gradient_tolerance_exits_three() {
    let out = crowdloc(&["grad-check", "--trials", "2", "--tol", "1e-300"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn success_prints_one_summary_line() {
    let dir = tempfile::tempdir().unwrap();
    let trace = path(dir.path(), "trace.csv");
    let out = crowdloc(&["simulate", "--steps", "5", "--out", s(&trace)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].starts_with("OK simulate "), "{}", lines[0]);
    let text = std::fs::read_to_string(&trace).unwrap();
    assert!(text.starts_with("step,locate_loss,count_loss,iou,f1"));
    assert_eq!(text.lines().count(), 1 + 5);
}

#[test]
fn outputs_are_all_or_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let trace = path(dir.path(), "trace.csv");
    let scene = dir.path().join("missing").join("scene.json");
    let out = crowdloc(&["simulate", "--steps", "5", "--out", s(&trace), "--scene-out", s(&scene)]);
    assert_eq!(code(&out), 2);
    assert!(!trace.exists(), "partial output left behind");
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = path(dir.path(), "scene.json");
    let cands = path(dir.path(), "cands.csv");
    let out = crowdloc(&[
        "simulate", "--seed", "2", "--steps", "50", "--out", s(&path(dir.path(), "t.csv")),
        "--scene-out", s(&scene), "--candidates-out", s(&cands),
    ]);
    assert_eq!(code(&out), 0);

    let pyr = path(dir.path(), "pyr.json");
    let out = crowdloc(&["learn-priors", "--annotations", s(&scene), "--levels", "1,2,4", "--out", s(&pyr)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&pyr).unwrap()).unwrap();
    assert_eq!(json["levels"].as_array().unwrap().len(), 3);

    // ground truth scored against itself is perfect
    let res = path(dir.path(), "eval.json");
    let out = crowdloc(&["evaluate", "--preds", s(&scene), "--gts", s(&scene), "--out", s(&res)]);
    assert_eq!(code(&out), 0);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&res).unwrap()).unwrap();
    assert_eq!(json["f1"], 1.0);
    assert_eq!(json["fp"], 0);
    assert_eq!(json["mae"], 0.0);

    let m = path(dir.path(), "match.json");
    let out = crowdloc(&["match-demo", "--candidates", s(&cands), "--gts", s(&scene), "--out", s(&m)]);
    assert_eq!(code(&out), 0);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&m).unwrap()).unwrap();
    let total = |k: &str| json["losses"][k]["total"].as_f64().unwrap();
    assert!(total("with_ctr") >= total("without_ctr"));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("OK match-demo "));
}
