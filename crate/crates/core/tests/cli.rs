use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskgrid"))
        .args(args)
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env("RISKGRID_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small data set split into train.csv and test.csv.
fn prepared_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["synth", "--n", "500", "--seed", "3", "--out", "data.csv"]);
    ok(p, &["split", "--data", "data.csv", "--seed", "3", "--train-out", "train.csv", "--test-out", "test.csv"]);
    dir
}

#[test]
fn synth_defaults_follow_class_ratios() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--out", "data.csv"]);
    let mut rdr = csv::Reader::from_path(dir.path().join("data.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let state = headers.iter().position(|h| h == "risk_state").expect("risk_state column");
    let mut counts = std::collections::BTreeMap::new();
    let mut rows = 0;
    for record in rdr.records() {
        *counts.entry(record.unwrap()[state].to_string()).or_insert(0usize) += 1;
        rows += 1;
    }
    assert_eq!(rows, 20531);
    let mut sizes: Vec<usize> = counts.values().copied().collect();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![1967, 5475, 5868, 7221]);
    assert!(dir.path().join("data.manifest.json").exists());
}

#[test]
fn argument_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(p, &["synth", "--noise", "1.5", "--out", "x.csv"]), 2);
    assert_eq!(code(p, &["train", "--model", "qidnn", "--out", "m.json"]), 2);
    assert_eq!(code(p, &["no-such-command"]), 2);
    assert_eq!(code(p, &["--help"]), 0);
    assert!(!p.join("x.csv").exists());
}

#[test]
fn pipeline_codes_and_outputs() {
    let dir = prepared_dir();
    let p = dir.path();

    let train_rows = csv::Reader::from_path(p.join("train.csv")).unwrap().records().count();
    let test_rows = csv::Reader::from_path(p.join("test.csv")).unwrap().records().count();
    assert_eq!(train_rows + test_rows, 500);

    assert_eq!(
        code(p, &["train", "--model", "base-dnn", "--data", "train.csv", "--qi-pairs", "auto:3", "--out", "b.json"]),
        2
    );
    ok(p, &["train", "--model", "base-dnn", "--data", "train.csv", "--max-epochs", "4", "--out", "base.json"]);
    ok(p, &["train", "--model", "qidnn", "--data", "train.csv", "--qi-pairs", "auto:7", "--screen-model", "base.json", "--max-epochs", "4", "--out", "qidnn.json"]);
    ok(p, &["train", "--model", "mmoe", "--data", "train.csv", "--qi-pairs", "LSBP:RSBP,LDBP:HbA1c", "--max-epochs", "4", "--out", "mmoe.json"]);
    assert!(p.join("qidnn.trace.csv").exists());
    assert!(p.join("qidnn.manifest.json").exists());

    let ck = json(&p.join("qidnn.json"));
    assert_eq!(ck["extra"]["qi_pairs"].as_array().unwrap().len(), 7);
    assert_eq!(ck["extra"]["qi_features"].as_array().unwrap().len(), 7);
    let mmoe = json(&p.join("mmoe.json"));
    let features: Vec<&str> = mmoe["extra"]["qi_features"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(features.len(), 4);
    for f in ["LSBP", "RSBP", "LDBP", "HbA1c"] {
        assert!(features.contains(&f), "{f} missing from {features:?}");
    }

    ok(p, &["eval", "--model-path", "qidnn.json", "--data", "test.csv", "--out", "eval.json"]);
    let report = json(&p.join("eval.json"));
    assert_eq!(report["rows"].as_u64().unwrap() as usize, test_rows);
    let support: u64 = report["risk_state"]["classes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["support"].as_u64().unwrap())
        .sum();
    assert_eq!(support as usize, test_rows);
    assert!(report["stroke"].is_null());

    let text = ok(p, &["eval", "--model-path", "mmoe.json", "--data", "test.csv", "--out", "eval-mmoe.json"]);
    assert!(text.contains("stroke occurrence"));
    let report = json(&p.join("eval-mmoe.json"));
    assert!(report["stroke"]["auc"].is_number());

    assert_eq!(
        code(p, &["explain", "--model-path", "qidnn.json", "--data", "test.csv", "--sample-id", "999999", "--out-svg", "svg", "--out-json", "e.json"]),
        3
    );
    assert!(!p.join("e.json").exists());
    assert_eq!(code(p, &["eval", "--model-path", "missing.json", "--data", "test.csv"]), 3);
    assert_eq!(
        code(p, &["project", "--model-path", "qidnn.json", "--data", "test.csv", "--out", "proj.csv"]),
        4
    );
    ok(p, &["project", "--model-path", "base.json", "--data", "test.csv", "--out", "proj.csv"]);
    let mut rdr = csv::Reader::from_path(p.join("proj.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 10);
    assert_eq!(rdr.records().count(), test_rows);
}

#[test]
fn explain_writes_plots_and_transition_flag() {
    let dir = prepared_dir();
    let p = dir.path();
    ok(p, &["train", "--model", "base-dnn", "--data", "train.csv", "--max-epochs", "3", "--out", "base.json"]);
    // Sample ids are row positions in the file read.
    let id = "0";
    let explain = |threshold: &str, out: &str| {
        ok(
            p,
            &[
                "explain", "--model-path", "base.json", "--data", "test.csv", "--sample-id", id,
                "--out-svg", "svg", "--out-json", out, "--transition-threshold", threshold,
            ],
        )
    };

    // Any runner-up reaches a vanishing share of the top score.
    let text = explain("0.000001", "loose.json");
    assert!(text.contains("tendency toward"), "{text}");
    let body = json(&p.join("loose.json"));
    assert_eq!(body["transition"]["flagged"], Value::Bool(true));
    let ratio = body["transition"]["ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio <= 1.0);
    assert_eq!(body["explanations"].as_array().unwrap().len(), 4);
    for state in ["low", "medium", "high", "attack"] {
        let svg = std::fs::read_to_string(p.join("svg").join(format!("force-{state}.svg"))).unwrap();
        assert!(svg.contains("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    // Only a tie with the top score passes a threshold of one.
    let text = explain("1", "strict.json");
    let flagged = json(&p.join("strict.json"))["transition"]["flagged"].as_bool().unwrap();
    assert_eq!(flagged, text.contains("tendency toward"));
    assert_eq!(flagged, ratio >= 1.0);

    assert_eq!(
        code(p, &["explain", "--model-path", "base.json", "--data", "test.csv", "--sample-id", id, "--out-svg", "svg", "--out-json", "x.json", "--transition-threshold", "1.5"]),
        2
    );
}

#[test]
fn rerun_reproduces_a_recorded_run() {
    let dir = prepared_dir();
    let p = dir.path();
    ok(p, &["train", "--model", "qidnn", "--data", "train.csv", "--qi-pairs", "LSBP:RSBP", "--max-epochs", "3", "--out", "q.json"]);
    let before = std::fs::read(p.join("q.json")).unwrap();
    let text = ok(p, &["rerun", "--manifest", "q.manifest.json"]);
    assert!(text.contains("bit-for-bit"), "{text}");
    assert_eq!(std::fs::read(p.join("q.json")).unwrap(), before);

    std::fs::write(p.join("train.csv"), "changed\n").unwrap();
    assert_eq!(code(p, &["rerun", "--manifest", "q.manifest.json"]), 3);
}
