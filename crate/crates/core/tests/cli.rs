use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use collapse_lab::arch::Container;
use serde_json::Value;
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_collapse-lab"))
        .args(args)
        .current_dir(dir)
        .env_remove("COLLAPSE_LAB_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = run(tmp.path(), &["gufm", "--config", "absent.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "c.json", r#"{"classes": 3, "clases": 4}"#);
    let out = run(tmp.path(), &["gufm", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("clases"));
}

#[test]
fn bad_subcommand_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(run(tmp.path(), &["collapse"]).status.code(), Some(2));
}

#[test]
fn gufm_mse_certificate_is_collapsed() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "g.json", r#"{"classes": 3, "per_class": 2, "dim": 8, "lambda": 0.1, "loss": "mse"}"#);
    let out = run(tmp.path(), &["gufm", "--config", "g.json", "--out", "res"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cert = &json(tmp.path().join("res/certificate.json"))["certificate"];
    for key in ["nc1", "nc2b", "nc3"] {
        assert!(cert[key].as_f64().unwrap() < 1e-10, "{key}");
    }
    let container = Container::load(tmp.path().join("res/gufm.bin")).unwrap();
    assert_eq!(container.get("gufm.w").unwrap().shape(), (3, 8));
}

#[test]
fn metrics_of_collapsed_features_vanish() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "x.csv", "2,0\n1,0\n0,3\n0,0.5\n");
    write(tmp.path(), "w.csv", "1,0\n0,1\n");
    write(tmp.path(), "y.csv", "0\n0\n1\n1\n");
    write(tmp.path(), "m.json", r#"{"features": "x.csv", "weights": "w.csv", "labels": "y.csv", "loss": "mse"}"#);
    let out = run(tmp.path(), &["metrics", "--config", "m.json", "--out", "res"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(tmp.path().join("res/nc_report.json"));
    assert_eq!(report["nc3"].as_f64().unwrap(), 0.0);
    assert_eq!(report["nc2b"].as_f64().unwrap(), 0.0);
    let csv = fs::read_to_string(tmp.path().join("res/nc_report.csv")).unwrap();
    assert!(csv.starts_with("nc1,nc2a,nc2b,nc3,which_nc2\n"));

    write(tmp.path(), "y.csv", "0\n0\n0\n1\n");
    assert_eq!(run(tmp.path(), &["metrics", "--config", "m.json"]).status.code(), Some(2));
}

#[test]
fn one_cell_sweep_writes_one_row() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "s.json", r#"{"depths": [2], "seeds": [0], "steps": 10}"#);
    let out = run(tmp.path(), &["sweep", "--config", "s.json", "--out", "res"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("res/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "architecture,depth,seed,objective,accuracy,nc1,nc2a,nc2b,nc3");
    assert!(lines[1].starts_with("rn1,2,0,"));
    assert_eq!(json(tmp.path().join("res/sweep.json"))["dropped_count"], 0);
    assert_eq!(json(tmp.path().join("res/trend.json")).as_array().unwrap().len(), 4);
}

#[test]
fn sweep_outputs_do_not_depend_on_thread_count() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "s.json", r#"{"depths": [2, 3], "seeds": [0, 1], "steps": 15, "width": 8}"#);
    let a = run(tmp.path(), &["sweep", "--config", "s.json", "--out", "one", "--threads", "1", "--seed", "5"]);
    let b = Command::new(env!("CARGO_BIN_EXE_collapse-lab"))
        .args(["sweep", "--config", "s.json", "--out", "many", "--seed", "5"])
        .current_dir(tmp.path())
        .env("COLLAPSE_LAB_THREADS", "4")
        .output()
        .unwrap();
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    for file in ["sweep.csv", "sweep.json", "trend.json"] {
        let x = fs::read(tmp.path().join("one").join(file)).unwrap();
        let y = fs::read(tmp.path().join("many").join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
}

#[test]
fn diverging_sweep_is_a_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "s.json", r#"{"depths": [2], "seeds": [0], "steps": 5, "learning_rate": 1e200, "momentum": 0}"#);
    assert_eq!(run(tmp.path(), &["sweep", "--config", "s.json"]).status.code(), Some(3));
}

#[test]
fn gradcheck_reports_each_architecture() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "g.json", r#"{"variants": ["rn1", "t11"], "placements": ["post"]}"#);
    let out = run(tmp.path(), &["gradcheck", "--config", "g.json", "--out", "res"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = json(tmp.path().join("res/gradcheck.json"));
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[1]["variant"], "t11");

    write(tmp.path(), "g.json", r#"{"variants": ["rn1"], "placements": ["pre"], "check": {"tolerance": 1e-30}}"#);
    assert_eq!(run(tmp.path(), &["gradcheck", "--config", "g.json"]).status.code(), Some(1));
}

#[test]
fn synthesis_writes_network_ledger_and_verification() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "s.json", r#"{"synthesis": {"l1": 10, "l2": 10}}"#);
    let out = run(tmp.path(), &["synthesize", "--config", "s.json", "--out", "res"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(tmp.path().join("res/verification.json"))["passed"], true);
    let ledger = json(tmp.path().join("res/ledger.json"));
    assert!(ledger["stage1_reg_sum"].as_f64().unwrap() <= ledger["stage1_bound"].as_f64().unwrap());
    Container::load(tmp.path().join("res/network.bin")).unwrap().to_network().unwrap();
}

#[test]
fn unreachable_margin_floor_fails_verification() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "s.json", r#"{"synthesis": {"l1": 5, "l2": 5, "margin_floor": 0.9}}"#);
    let out = run(tmp.path(), &["synthesize", "--config", "s.json"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gap_curve_has_one_row_per_grid_point() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "g.json", r#"{"grid": [10, 20]}"#);
    let out = run(tmp.path(), &["gapcurve", "--config", "g.json", "--out", "res"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("res/gapcurve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(json(tmp.path().join("res/gapcurve.json"))["slope"].as_f64().unwrap() < 0.0);
}

#[test]
fn flatness_compares_against_the_reference_sweep() {
    let tmp = TempDir::new().unwrap();
    let small = r#"{"depths": [2, 3], "seeds": [0], "steps": 10, "width": 8"#;
    let config = format!(r#"{{"reference": {small}}}, "two_layer": {small}, "architecture": "rn2"}}}}"#);
    write(tmp.path(), "f.json", &config);
    let out = run(tmp.path(), &["flatness", "--config", "f.json", "--out", "res"]);
    let report = json(tmp.path().join("res/flatness.json"));
    let passed = report["passed"].as_bool().unwrap();
    assert_eq!(out.status.code(), Some(if passed { 0 } else { 1 }));
    assert!(tmp.path().join("res/reference.csv").exists());
    assert!(tmp.path().join("res/two_layer.csv").exists());
}
