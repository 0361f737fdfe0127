use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpevidence")).args(args).output().expect("binary runs")
}

fn json_out(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("valid JSON on stdout")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_linear_csv(dir: &Path) -> String {
    let path = dir.join("lin.csv");
    let mut text = String::from("x,y\n");
    for i in 0..15 {
        let x = i as f64 / 7.0;
        text.push_str(&format!("{x},{}\n", 0.8 * x + 0.05 * ((i * 7) % 5) as f64));
    }
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn evaluate_benchmark_reports_stabilized_laplace() {
    let v = json_out(&["evaluate", "--data", "linear-benchmark", "--kernel", "SE", "--seed", "1"]);
    let lap_s = v["result"]["log_z_lap_s"].as_f64().unwrap();
    assert!((lap_s + 9.17).abs() <= 1.0, "{lap_s}");
    assert_eq!(v["provenance"]["seed"], 1);
    assert_eq!(v["provenance"]["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["result"]["u"], 2);
    assert!(v["dataset"]["normalization"].is_null());
}

#[test]
fn bad_kernel_is_a_config_error() {
    let out = run(&["evaluate", "--data", "linear-benchmark", "--kernel", "SE+"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 3"));
}

#[test]
fn missing_data_file_is_a_config_error() {
    let out = run(&["evaluate", "--data", "/nonexistent/data.csv", "--kernel", "SE"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn rational_quadratic_preset_from_csv() {
    let dir = TempDir::new().unwrap();
    let data = write_linear_csv(dir.path());
    let v = json_out(&["evaluate", "--data", &data, "--kernel", "K3", "--restarts", "2"]);
    // K3 brings its own scale, lengthscale and alpha; the model adds noise
    assert_eq!(v["result"]["u"], 4);
    assert!(v["dataset"]["normalization"]["std"].as_f64().unwrap() > 0.0);
}

#[test]
fn evaluate_csv_writes_file_with_provenance_columns() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("eval.csv");
    let status = run(&[
        "evaluate", "--data", "linear-benchmark", "--kernel", "LIN", "--format", "csv", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&status), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("kernel,n,u,MLL,MAP"));
    assert!(header.ends_with("tool_version,seed,config"));
    assert!(lines.next().unwrap().starts_with("LIN,10,2,"));
}

#[test]
fn oracle_both_methods_agree_on_benchmark() {
    let dir = TempDir::new().unwrap();
    let samples = dir.path().join("samples.csv");
    let v = json_out(&[
        "oracle", "--data", "linear-benchmark", "--kernel", "SE", "--method", "both", "--seed", "4", "--samples",
        samples.to_str().unwrap(),
    ]);
    let estimates = v["estimates"].as_array().unwrap();
    assert_eq!(estimates.len(), 2);
    for e in estimates {
        let log_z = e["log_z"].as_f64().unwrap();
        assert!((log_z + 8.12).abs() <= 0.3, "{e}");
    }
    let text = std::fs::read_to_string(&samples).unwrap();
    assert!(text.lines().next().unwrap().ends_with("log_likelihood,weight"));
    assert!(text.lines().count() > 500);
}

#[test]
fn quadrature_rejects_four_hyperparameters() {
    let out = run(&["oracle", "--data", "linear-benchmark", "--kernel", "SE+LIN+MAT32", "--method", "quadrature"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ellipse_requires_two_hyperparameters() {
    let out = run(&["ellipse", "--data", "linear-benchmark", "--kernel", "SE+LIN"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ellipse_shares_on_benchmark() {
    let v = json_out(&["ellipse", "--data", "linear-benchmark", "--kernel", "SE", "--nested-samples", "--seed", "2"]);
    let rows = v["ellipses"].as_array().unwrap();
    let share = |name: &str| {
        rows.iter().find(|r| r["variant"] == name).unwrap()["sample_share"].as_f64().unwrap()
    };
    let (s, a, b) = (share("LapS"), share("LapAIC"), share("LapBIC"));
    assert!((0.45..=0.75).contains(&s), "{s}");
    assert!(b < a && a < s);
    // both eigenvalues sit below 2π, so the LapS ellipse is a circle
    let lengths = rows.iter().find(|r| r["variant"] == "LapS").unwrap()["ellipse"]["lengths"].clone();
    let (l0, l1) = (lengths[0].as_f64().unwrap(), lengths[1].as_f64().unwrap());
    assert!((l0 - l1).abs() < 1e-12);
    assert!((l0 - 2.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
}

#[test]
fn generate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = run(&["generate", "--generator", "SE+SE", "--n", "30", "--seed", "9", "--format", "csv", "--out", p.to_str().unwrap()]);
        assert_eq!(code(&out), 0);
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 31);
    let provenance: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.provenance.json")).unwrap()).unwrap();
    assert_eq!(provenance["provenance"]["seed"], 9);
    assert_eq!(provenance["spec"]["generator"], "SE+SE");
}

#[test]
fn unknown_generator_is_a_config_error() {
    assert_eq!(code(&run(&["generate", "--generator", "RBF"])), 2);
}

#[test]
fn search_trace_and_summary() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("lin.csv");
    let out = run(&["generate", "--generator", "LIN", "--n", "20", "--seed", "4", "--format", "csv", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let summary = dir.path().join("summary.csv");
    let v = json_out(&[
        "search", "--data", data.to_str().unwrap(), "--no-normalize", "--criterion", "LapAIC,MLL", "--depth", "2",
        "--restarts", "2", "--generating", "LIN", "--score-evidence", "--summary", summary.to_str().unwrap(),
    ]);
    let traces = v["traces"].as_array().unwrap();
    assert_eq!(traces.len(), 2);
    for t in traces {
        assert!(t["iterations"].as_array().unwrap().len() <= 2);
    }
    let summaries = v["summaries"].as_array().unwrap();
    assert_eq!(summaries[0]["criterion"], "LapAIC");
    assert_eq!(summaries[0]["found"], "LIN");
    assert_eq!(summaries[0]["recognized"], true);
    assert!(summaries[0]["log_z"].as_f64().is_some());
    let text = std::fs::read_to_string(&summary).unwrap();
    assert!(text.starts_with("dataset,criterion,found,recognized,log_z,"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn unknown_criterion_is_a_config_error() {
    let out = run(&["search", "--data", "linear-benchmark", "--criterion", "WAIC"]);
    assert_eq!(code(&out), 2);
}
