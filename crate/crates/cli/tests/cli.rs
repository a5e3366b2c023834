use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emla_core::io::RunArtifacts;
use emla_core::nlp::OptimizationResult;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn emla(sub: &str, scenario: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emla"))
        .arg(sub)
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .expect("binary runs")
}

/// Copies the shipped scenario directory so a test can mutate it.
fn scenario_copy(dir: &Path) -> PathBuf {
    for entry in fs::read_dir(scenarios()).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, dir.join(p.file_name().unwrap())).unwrap();
    }
    dir.join("desk.json")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn same_files(a: &Path, b: &Path, skip: &[&str]) {
    let mut names: Vec<_> = fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| !skip.contains(&n.as_str()))
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(
            fs::read(a.join(&n)).unwrap(),
            fs::read(b.join(&n)).unwrap(),
            "{n} differs"
        );
    }
}

#[test]
fn simulate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let desk = scenarios().join("desk.json");
    for run in ["a", "b"] {
        let out = emla("simulate", &desk, &dir.path().join(run), &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    same_files(&dir.path().join("a"), &dir.path().join("b"), &[]);
    let art: RunArtifacts = serde_json::from_slice(&fs::read(dir.path().join("a/artifacts.json")).unwrap()).unwrap();
    art.verify(&dir.path().join("a")).unwrap();
}

#[test]
fn optimize_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let desk = scenarios().join("desk.json");
    for run in ["a", "b"] {
        let out = emla("optimize", &desk, &dir.path().join(run), &["--seed", "7"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    same_files(&dir.path().join("a"), &dir.path().join("b"), &["timing.json"]);

    let text = fs::read_to_string(dir.path().join("a/result.json")).unwrap();
    let result: OptimizationResult = serde_json::from_str(&text).unwrap();
    let again = serde_json::to_string_pretty(&result).unwrap() + "\n";
    assert_eq!(again, text);
    assert!(result.objective_final <= result.objective_initial);
    assert!(dir.path().join("a/timing.json").is_file());

    let mut trace = csv::Reader::from_path(dir.path().join("a/trace.csv")).unwrap();
    assert_eq!(trace.records().count(), result.objective_trace.len());
}

#[test]
fn max_iter_override_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let out = emla(
        "optimize",
        &scenarios().join("desk.json"),
        dir.path(),
        &["--max-iter", "1"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result: OptimizationResult =
        serde_json::from_slice(&fs::read(dir.path().join("result.json")).unwrap()).unwrap();
    assert!(result.iterations <= 1);
}

#[test]
fn effmap_writes_one_csv_per_actuator() {
    let dir = tempfile::tempdir().unwrap();
    let out = emla("effmap", &scenarios().join("desk.json"), dir.path(), &[]);
    assert!(out.status.success());
    for i in 0..3 {
        let mut r = csv::Reader::from_path(dir.path().join(format!("effmap_{i}.csv"))).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["v_x", "f_x", "eta"]);
        for rec in r.records() {
            let eta: f64 = rec.unwrap()[2].parse().unwrap();
            assert!((0.05..=1.0).contains(&eta));
        }
    }
}

#[test]
fn validate_passes_on_shipped_scenarios() {
    for name in ["desk.json", "full_spiral.json"] {
        let dir = tempfile::tempdir().unwrap();
        let out = emla("validate", &scenarios().join(name), dir.path(), &[]);
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(out.status.success(), "{name}: {stdout}");
        assert!(stdout.lines().all(|l| l.starts_with("PASS")));
    }
}

#[test]
fn validate_rejects_non_positive_length() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenario_copy(dir.path());
    let robot_path = dir.path().join("robot.json");
    let mut robot: serde_json::Value = serde_json::from_slice(&fs::read(&robot_path).unwrap()).unwrap();
    robot["joints"][0]["closed_chain"]["L"] = serde_json::json!(-1.0);
    fs::write(&robot_path, serde_json::to_string_pretty(&robot).unwrap()).unwrap();

    let out = emla("validate", &scenario, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("FAIL robot description") && stdout.contains("(21g)"),
        "{stdout}"
    );
    let err = stderr_json(&out);
    assert_eq!(err["error"], "validation");
    assert!(err["message"].as_str().unwrap().contains("(21g)"));
}

#[test]
fn missing_and_malformed_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = emla("simulate", &dir.path().join("absent.json"), &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_json(&out)["error"], "io");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"robot\": ").unwrap();
    let out = emla("optimize", &bad, &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_json(&out)["error"], "parse");
}

#[test]
fn unreachable_reference_lists_times() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenario_copy(dir.path());
    let mut spec: serde_json::Value = serde_json::from_slice(&fs::read(&scenario).unwrap()).unwrap();
    spec["trajectory"]["center"] = serde_json::json!([20.0, 0.0]);
    fs::write(&scenario, serde_json::to_string(&spec).unwrap()).unwrap();
    let out = emla("simulate", &scenario, &dir.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "reachability");
    assert!(!err["times"].as_array().unwrap().is_empty());
}
