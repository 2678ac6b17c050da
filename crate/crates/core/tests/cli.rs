use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn greenlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_greenlab"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_synthetic_writes_tables_and_topology() {
    let dir = tempfile::tempdir().unwrap();
    let params = fixture("reference.params");
    let out = greenlab(&[
        "simulate", "--params", s(&params), "--synthetic", "tree1", "--cycles", "21", "--out",
        s(dir.path()), "--plots",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["cycles.csv", "trunk.csv", "rings.csv", "branches.csv", "topology.json", "production.svg"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let cycles = std::fs::read_to_string(dir.path().join("cycles.csv")).unwrap();
    assert_eq!(cycles.lines().count(), 22);
}

#[test]
fn simulate_reads_script_from_target() {
    let dir = tempfile::tempdir().unwrap();
    let out = greenlab(&[
        "simulate",
        "--params",
        s(&fixture("reference.params")),
        "--target",
        s(&fixture("small_b.csv")),
        "--out",
        s(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trunk = std::fs::read_to_string(dir.path().join("trunk.csv")).unwrap();
    assert_eq!(trunk.lines().count(), 6);
}

#[test]
fn validate_rejects_lambda_above_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("reference.params"))
        .unwrap()
        .replace("lambda_mix = 0.13", "lambda_mix = 1.2");
    let path = dir.path().join("bad.params");
    std::fs::write(&path, text).unwrap();
    let out = greenlab(&["validate", "--params", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_mix"));
}

#[test]
fn validate_accepts_bundled_fixtures() {
    let out = greenlab(&[
        "validate",
        "--params",
        s(&fixture("fit_small.params")),
        "--target",
        s(&fixture("tree1_like.csv")),
        "--target",
        s(&fixture("tree2_like.csv")),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn malformed_target_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "[script]\ngu_index,metamer_count,branches\n1,three,\n").unwrap();
    let out = greenlab(&["validate", "--params", s(&fixture("reference.params")), "--target", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.csv:3: column 2"), "{err}");
}

#[test]
fn missing_file_is_a_runtime_failure() {
    let out = greenlab(&["validate", "--params", "/nonexistent/params"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_with_two_targets_reports_two_environments() {
    let dir = tempfile::tempdir().unwrap();
    let out = greenlab(&[
        "fit",
        "--params",
        s(&fixture("fit_small.params")),
        "--target",
        s(&fixture("small_a.csv")),
        "--target",
        s(&fixture("small_c.csv")),
        "--out",
        s(dir.path()),
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit_result.json")).unwrap())
            .unwrap();
    assert_eq!(json["environment"].as_array().unwrap().len(), 2);
    assert_eq!(json["seed"], 3);
    assert!(dir.path().join("predicted.csv").is_file());
    let refit = greenlab(&["validate", "--params", s(&dir.path().join("fitted_params.txt"))]);
    assert_eq!(refit.status.code(), Some(0));
}

#[test]
fn fit_requires_a_target() {
    let dir = tempfile::tempdir().unwrap();
    let out = greenlab(&["fit", "--params", s(&fixture("reference.params")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracle_agrees_on_small_fixtures() {
    for name in ["small_a.csv", "small_b.csv"] {
        let dir = tempfile::tempdir().unwrap();
        let out = greenlab(&[
            "oracle",
            "--params",
            s(&fixture("reference.params")),
            "--target",
            s(&fixture(name)),
            "--out",
            s(dir.path()),
        ]);
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stdout));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("equal"));
    }
}
