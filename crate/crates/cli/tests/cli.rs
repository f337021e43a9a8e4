use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plsp::simulation::{generate_scenario, Case, ScenarioConfig};

fn plsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plsp"))
        .args(args)
        .env_remove("PLSP_THREADS")
        .output()
        .expect("binary runs")
}

fn path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_case(dir: &Path, case: Case, n: usize) -> PathBuf {
    let mut cfg = ScenarioConfig::new(case, 0.3, 1, 5);
    cfg.n = n;
    let (data, _) = generate_scenario(&cfg, 0).unwrap();
    let file = path(dir, "data.csv");
    std::fs::write(&file, data.to_csv().unwrap()).unwrap();
    file
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn lambda_out_of_range_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "sim.json");
    let o = plsp(&["simulate", "--case", "2", "--lambda", "1.2", "--reps", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda"));
    assert!(!out.exists());
}

#[test]
fn bad_thread_override_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "sim.json");
    let o = Command::new(env!("CARGO_BIN_EXE_plsp"))
        .args(["simulate", "--case", "2", "--lambda", "0.2", "--reps", "1", "--out", s(&out)])
        .env("PLSP_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_replication_has_zero_sd() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "sim.json");
    let o = plsp(&[
        "simulate", "--case", "2", "--lambda", "0.2", "--n", "80", "--reps", "1", "--seed", "3", "--methods", "plpm",
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("PLPM")).collect();
    assert_eq!(rows.len(), 2, "{table}");
    for r in rows {
        assert!(r.trim_end().ends_with("0.0000"), "{r}");
    }
    let doc = json(&out);
    assert_eq!(doc["format_version"], 1);
    assert_eq!(doc["config"]["reps"], 1);
    let b1 = &doc["summary"]["methods"]["plpm"]["parameters"]["beta1"];
    assert_eq!(b1["sd"], 0.0);
    assert_eq!(b1["mean"], b1["median"]);
    assert_eq!(b1["mean"], doc["records"][0]["methods"]["plpm"]["estimates"]["beta1"]);
}

#[test]
fn fit_and_gcurve_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_case(dir.path(), Case::Two, 80);

    let spatial = path(dir.path(), "plspm.json");
    let o = plsp(&[
        "fit", "--data", s(&data), "--method", "plspm", "--bandwidth", "0.5", "--covariance", "on", "--out", s(&spatial),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&spatial);
    assert_eq!(doc["format_version"], 1);
    assert_eq!(doc["k_neighbors"], 6);
    assert_eq!(doc["parameter_names"], serde_json::json!(["beta1", "beta2", "lambda"]));
    for v in doc["estimates"].as_array().unwrap() {
        assert!(v.as_f64().unwrap().is_finite());
    }
    assert_eq!(doc["bandwidth"], 0.5);
    assert_eq!(doc["g_hat_at_sample"].as_array().unwrap().len(), 80);
    assert!(doc.get("covariance").is_some() || doc.get("covariance_error").is_some());

    let plain = path(dir.path(), "plpm.json");
    let o = plsp(&["fit", "--data", s(&data), "--method", "plpm", "--out", s(&plain)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json(&plain);
    assert_eq!(doc["parameter_names"], serde_json::json!(["beta1", "beta2"]));
    assert!(doc.get("lambda").is_none());

    let curve = path(dir.path(), "g.csv");
    let o = plsp(&[
        "gcurve", "--fit", s(&spatial), "--data", s(&data), "--grid", "-2:2:0.1", "--out", s(&curve),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&curve).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "z,g_hat");
    assert_eq!(lines.len(), 42);
    assert!(lines[1].starts_with("-2,"));
    assert!(lines[21].starts_with("0,"));
    assert!(!lines[21].ends_with(','), "interior point should have a value: {}", lines[21]);

    let far = path(dir.path(), "far.csv");
    let o = plsp(&["gcurve", "--fit", s(&plain), "--data", s(&data), "--grid", "-15:-14:1", "--out", s(&far)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&far).unwrap(), "z,g_hat\n-15,\n-14,\n");
}

#[test]
fn fit_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_case(dir.path(), Case::One, 60);
    let (a, b) = (path(dir.path(), "a.json"), path(dir.path(), "b.json"));
    for out in [&a, &b] {
        let o = plsp(&["fit", "--data", s(&data), "--method", "plpm", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn bad_response_reports_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("y,x1,x2,z,sx,sy\n");
    for r in 1..=25 {
        let y = if r == 5 { "2".to_string() } else { (r % 2).to_string() };
        csv.push_str(&format!("{y},{},{},{},{},{}\n", r as f64 * 0.1, -(r as f64), r as f64 / 7.0, r, r * 3));
    }
    let data = path(dir.path(), "bad.csv");
    std::fs::write(&data, csv).unwrap();
    let out = path(dir.path(), "fit.json");
    let o = plsp(&["fit", "--data", s(&data), "--method", "plpm", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data error: row 5"));
    assert!(!out.exists());
}

#[test]
fn missing_coordinates_column_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("y,x1,z\n");
    for r in 0..25 {
        csv.push_str(&format!("{},{},{}\n", r % 2, r, r));
    }
    let data = path(dir.path(), "nocoords.csv");
    std::fs::write(&data, csv).unwrap();
    let o = plsp(&["fit", "--data", s(&data), "--method", "plpm", "--out", s(&path(dir.path(), "x.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data error"));
}
