use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cfdecode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfdecode"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cfdecode(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn recover_then_replay_reproduces_reference() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    fs::write(&corpus, "the cat sat\nthe hat sat\na cat and a hat\n").unwrap();
    let model = dir.path().join("m.json");
    ok(&["train-toy", "--corpus", path(&corpus), "--order", "3", "--out", path(&model)]);
    let src = format!("toy:{}", path(&model));
    let trace = dir.path().join("t.gumt");
    ok(&["recover", "--model", &src, "--prompt", "", "--reference", "a tan cat", "--out", path(&trace), "--seed", "3"]);
    assert_eq!(&fs::read(&trace).unwrap()[..4], b"GUMT");
    let out: Value = serde_json::from_str(&ok(&["replay", "--model", &src, "--trace", path(&trace), "--intervened", ""])).unwrap();
    assert_eq!(out["output"], "a tan cat");
    assert_eq!(out["truncated"], false);

    let cf: Value = serde_json::from_str(&ok(&[
        "cf", "--model", &src, "--prompt", "", "--reference", "a tan cat", "--intervened", "the", "--beta", "0.5",
    ]))
    .unwrap();
    assert!(cf["output"].is_string());
}

#[test]
fn replay_refuses_a_foreign_trace() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, "abcabc\n").unwrap();
    let (m1, m2) = (dir.path().join("m1.json"), dir.path().join("m2.json"));
    ok(&["train-toy", "--corpus", path(&corpus), "--out", path(&m1)]);
    ok(&["train-toy", "--corpus", path(&corpus), "--smoothing", "0.5", "--out", path(&m2)]);
    let trace = dir.path().join("t.gumt");
    ok(&["recover", "--model", &format!("toy:{}", path(&m1)), "--prompt", "", "--reference", "abc", "--out", path(&trace)]);
    let out = cfdecode(&["replay", "--model", &format!("toy:{}", path(&m2)), "--trace", path(&trace), "--intervened", ""]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing to replay"));
}

#[test]
fn testbed_baselines_sweep_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let tb = dir.path().join("tb");
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"transitions_cap": 24}"#).unwrap();
    let msg = ok(&["make-testbed", "--out", path(&tb), "--spec", path(&spec)]);
    assert!(msg.starts_with("24 records"), "{msg}");
    let src = format!("testbed:{}", path(&tb));
    for (method, param) in [("sample", "1"), ("greedy", "0"), ("vocab-bias", "5")] {
        let out: Value = serde_json::from_str(&ok(&[
            "baseline", "--model", &src, "--method", method, "--param", param, "--intervened", "<z3>",
            "--reference", "abc", "--max-len", "40",
        ]))
        .unwrap();
        assert!(out["tokens"].as_array().unwrap().len() <= 40);
    }

    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"model": {"testbed": "tb"}, "methods": ["beta-hindsight", "sample"], "betas": [0.1], "output_dir": "out", "timing": false}"#,
    )
    .unwrap();
    let csv = ok(&["sweep", "--config", path(&cfg), "--workers", "2"]);
    assert_eq!(csv, fs::read_to_string(dir.path().join("out/results.csv")).unwrap());
    assert_eq!(csv.lines().count(), 3);

    let scored = dir.path().join("scored.jsonl");
    fs::write(
        &scored,
        concat!(
            r#"{"reference":"kitten","output":"sitting","target":1,"achieved":1}"#, "\n",
            r#"{"reference":"abc","output":"abc","target":4,"achieved":4}"#, "\n"
        ),
    )
    .unwrap();
    let report: Value = serde_json::from_str(&ok(&["evaluate", "--input", path(&scored), "--k", "4"])).unwrap();
    assert_eq!(report["n"], 2);
    assert_eq!(report["qwk"], 1.0);
    let sim = report["mean_similarity"].as_f64().unwrap();
    assert!((sim - (4.0 / 7.0 + 1.0) / 2.0).abs() < 1e-12);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let out = cfdecode(&["sweep", "--config", "/nonexistent/cfg.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = cfdecode(&["baseline", "--model", "nowhere", "--method", "sample", "--intervened", "x"]);
    assert!(!out.status.success());
}
