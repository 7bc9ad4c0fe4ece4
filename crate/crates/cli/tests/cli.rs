use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pdmp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdmp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn diagnostic(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("stderr is not empty");
    serde_json::from_str(last).expect("last stderr line is JSON")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TINY_BENCH: &str = r#"{
    "sample_sizes": [300],
    "replicates": 4,
    "seed": 3,
    "variance_kappas": [0.4],
    "variance_grid": {"start": 0.5, "stop": 2.5, "step": 0.1}
}"#;

#[test]
fn simulate_writes_rows_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdmp(
        dir.path(),
        &[
            "simulate", "--model", "tcp", "--kappa", "0.4", "--n", "1000", "--seed", "7", "--out",
            "t.csv",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,z,z_minus,s,t"));
    assert_eq!(lines.count(), 1000);

    let m = read_json(&dir.path().join("t.manifest.json"));
    assert_eq!(m["subcommand"], "simulate");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["outputs"], serde_json::json!(["t.csv"]));
    assert_eq!(m["config"]["chain"]["model"]["kappa"], 0.4);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdmp(dir.path(), &["simulate", "--n", "10", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(diagnostic(&out)["kind"], "UsageError");
}

#[test]
fn inconsistent_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdmp(
        dir.path(),
        &[
            "estimate",
            "--n",
            "100",
            "--estimator",
            "amg",
            "--bandwidth",
            "0.2",
            "--out",
            "e.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(diagnostic(&out)["kind"], "UsageError");
    let out = pdmp(dir.path(), &["simulate", "--n", "100"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pdmp(
        dir.path(),
        &["realdata", "--input", ".", "--temp", "30", "--out", "r"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_is_file_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdmp(
        dir.path(),
        &["bench", "--config", "missing.json", "--out", "b"],
    );
    assert_eq!(out.status.code(), Some(1));
    let d = diagnostic(&out);
    assert_eq!(d["kind"], "FileNotFound");
    assert!(d["message"].as_str().unwrap().contains("missing.json"));
}

#[test]
fn malformed_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\"replicates\": \"many\"}").unwrap();
    let out = pdmp(dir.path(), &["bench", "--config", "bad.json", "--out", "b"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(diagnostic(&out)["kind"], "InvalidJson");

    std::fs::write(dir.path().join("zero.json"), "{\"replicates\": 0}").unwrap();
    let out = pdmp(
        dir.path(),
        &["bench", "--config", "zero.json", "--out", "b"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(diagnostic(&out)["kind"], "InvalidConfig");
}

#[test]
fn bench_output_does_not_depend_on_jobs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY_BENCH).unwrap();
    for jobs in ["1", "3"] {
        let out = pdmp(
            dir.path(),
            &[
                "--jobs",
                jobs,
                "bench",
                "--config",
                "tiny.json",
                "--out",
                &format!("b{jobs}"),
            ],
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let m = read_json(&dir.path().join("b1/manifest.json"));
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 6);
    for o in outputs {
        let name = Path::new(o.as_str().unwrap()).file_name().unwrap();
        let a = std::fs::read(dir.path().join("b1").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b3").join(name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
    assert_eq!(
        m["config_hash"],
        read_json(&dir.path().join("b1/report.json"))["config_hash"]
    );
}

#[test]
fn rerun_from_manifest_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdmp(
        dir.path(),
        &[
            "adaptive",
            "--n",
            "2000",
            "--seed",
            "5",
            "--estimator",
            "k",
            "--out",
            "a.csv",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = read_json(&dir.path().join("a.manifest.json"));
    assert_eq!(m["outputs"], serde_json::json!(["a.csv", "fit.json"]));
    let fit = read_json(&dir.path().join("fit.json"));
    assert!(fit["m_star_post"].as_u64().unwrap() <= 25);
    assert_eq!(fit["estimator"], "adaptive_k");

    let rerun = tempfile::tempdir().unwrap();
    let argv: Vec<&str> = m["argv"].as_array().unwrap()[1..]
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(pdmp(rerun.path(), &argv).status.success());
    for f in ["a.csv", "fit.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(rerun.path().join(f)).unwrap()
        );
    }
}

#[test]
fn theory_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdmp(
        dir.path(),
        &[
            "theory",
            "--kappa",
            "0.5",
            "--grid",
            "0.5:2:0.5",
            "--out",
            "th.csv",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("th.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "x,mu,mu_ct,mu_minus,sigma_k,sigma_ks,sigma_amg");
    assert_eq!(rows.len(), 5);
    for row in &rows[1..] {
        let v: Vec<f64> = row.split(',').map(|f| f.parse().unwrap()).collect();
        assert!(v.iter().all(|x| x.is_finite() && *x > 0.0));
        // σ♣ = √κ σ♢
        assert!((v[4] - 0.5f64.sqrt() * v[5]).abs() < 1e-12 * v[5]);
    }
}

#[test]
fn lineage_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sim = pdmp(
        dir.path(),
        &[
            "simulate",
            "--model",
            "growth",
            "--n",
            "400",
            "--seed",
            "11",
            "--grid-dt",
            "1",
            "--lineages",
            "3",
            "--lineage-dir",
            "lin",
        ],
    );
    assert!(
        sim.status.success(),
        "{}",
        String::from_utf8_lossy(&sim.stderr)
    );
    assert_eq!(
        read_json(&dir.path().join("lin/manifest.json"))["outputs"]
            .as_array()
            .unwrap()
            .len(),
        3
    );

    let rd = pdmp(
        dir.path(),
        &[
            "realdata", "--input", "lin", "--temp", "37", "--method", "ks", "--out", "rd",
        ],
    );
    assert!(
        rd.status.success(),
        "{}",
        String::from_utf8_lossy(&rd.stderr)
    );
    let theta = read_json(&dir.path().join("rd/theta.json"));
    assert!((theta["theta"].as_f64().unwrap() - 0.025).abs() < 2.5e-4);
    assert_eq!(theta["divisions"], 1200);
    for f in [
        "chain.csv",
        "rate_curve.csv",
        "validation.csv",
        "manifest.json",
    ] {
        assert!(dir.path().join("rd").join(f).exists(), "{f}");
    }

    let val = pdmp(
        dir.path(),
        &[
            "validate",
            "--input",
            "lin",
            "--rate-curve",
            "rd/rate_curve.csv",
            "--out",
            "val",
        ],
    );
    assert!(
        val.status.success(),
        "{}",
        String::from_utf8_lossy(&val.stderr)
    );
    let v = read_json(&dir.path().join("val/validation.json"));
    assert_eq!(v["ks_distance"], theta["ks_distance"]);
    assert_eq!(
        std::fs::read(dir.path().join("val/validation.csv")).unwrap(),
        std::fs::read(dir.path().join("rd/validation.csv")).unwrap()
    );
}

#[test]
fn missing_input_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdmp(
        dir.path(),
        &["realdata", "--input", "nope", "--temp", "25", "--out", "r"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(diagnostic(&out)["kind"], "FileNotFound");
}
