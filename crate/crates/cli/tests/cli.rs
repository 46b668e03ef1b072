use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> (Output, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_bearing-opt")).args(args).output().unwrap();
    let json = serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    });
    (out, json)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let common = ["--agents", "3", "--seed", "4", "--horizon", "10", "--out", path(dir)];

    let (out, v) = run(&[&["fit-init"][..], &common].concat());
    assert!(out.status.success());
    assert!(v["num_params"].as_u64().unwrap() > 0);
    assert!(dir.join("params_init.json").exists());

    let (out, v) = run(&[&["simulate", "--trial", "1"][..], &common].concat());
    assert!(out.status.success(), "{v}");
    assert!(dir.join("traj_1.csv").exists() && dir.join("scenario.json").exists());
    assert!(v["path_length"].as_f64().unwrap() > 0.0);

    let (out, v) = run(&[&["train", "--train-ics", "1", "--max-iter", "2", "--fixed-step", "--case", "FullEd"][..], &common].concat());
    assert!(out.status.success(), "{v}");
    assert!(dir.join("params_opt.json").exists());
    assert!(v["objective_opt"].as_f64().unwrap() <= v["objective_init"].as_f64().unwrap());

    let scenario = dir.join("scenario.json");
    let (out, v) = run(&[
        "evaluate", "--scenario", path(&scenario), "--case", "FullEd", "--test-ics", "3", "--horizon", "10", "--fixed-step", "--out",
        path(dir),
    ]);
    assert!(out.status.success(), "{v}");
    assert_eq!(v["trials"].as_u64().unwrap() + v["failed"].as_u64().unwrap(), 3);
    let report = std::fs::read_to_string(dir.join("report.json")).unwrap();
    assert!(dir.join("report.csv").exists() && dir.join("opt").join("traj_0.csv").exists());

    let (out, _) = run(&["report", "--out", path(dir)]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(dir.join("report.json")).unwrap(), report);
}

#[test]
fn leaders_and_bump_are_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, v) = run(&["simulate", "--agents", "4", "--leaders", "0,2", "--bump", "--horizon", "5", "--out", path(tmp.path())]);
    assert!(out.status.success(), "{v}");
}

#[test]
fn failures_report_json_and_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let (out, v) = run(&["evaluate", "--agents", "3", "--params", path(&missing), "--out", path(tmp.path())]);
    assert!(!out.status.success());
    assert_eq!(v["error"]["kind"], "io");

    let (out, v) = run(&["simulate", "--agents", "3", "--leaders", "0,7", "--out", path(tmp.path())]);
    assert!(!out.status.success());
    assert_eq!(v["error"]["kind"], "invalid_config");

    let (out, v) = run(&["simulate", "--leaders", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(v["error"]["kind"], "usage");

    let (out, v) = run(&["report", "--out", path(tmp.path())]);
    assert!(!out.status.success());
    assert!(v["error"]["message"].as_str().unwrap().len() > 0);
}
