use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn wtal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wtal")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = wtal(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn lines(path: &str) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn report(path: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fuse_recovers_single_proposal() {
    let dir = tempfile::tempdir().unwrap();
    let input = p(dir.path(), "props.jsonl");
    std::fs::write(&input, "{\"video_id\":\"v\",\"start_s\":2.0,\"end_s\":6.0,\"score\":1.0,\"class_id\":1}\n").unwrap();
    let output = p(dir.path(), "pseudo.jsonl");
    let csv_dir = dir.path().join("wave");
    ok(&["fuse", "--input", &input, "--output", &output, "--wavelet-csv", csv_dir.to_str().unwrap()]);
    let recs = lines(&output);
    assert!(recs[0]["header"]["config_hash"].is_string());
    assert!(recs[0]["header"]["tool_version"].is_string());
    assert_eq!(recs.len(), 2);
    let r = &recs[1];
    assert_eq!(r["class_id"], 1);
    assert!((r["start_s"].as_f64().unwrap() - 2.0).abs() <= 1.0);
    assert!((r["end_s"].as_f64().unwrap() - 6.0).abs() <= 1.0);
    let csv = std::fs::read_to_string(csv_dir.join("v.csv")).unwrap();
    assert!(csv.starts_with("t,class_1\n"));
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn eval_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let gt = p(dir.path(), "gt.jsonl");
    std::fs::write(
        &gt,
        "{\"video_id\":\"a\",\"start_s\":1.0,\"end_s\":5.0,\"class_id\":1}\n{\"video_id\":\"b\",\"start_s\":3.0,\"end_s\":9.5,\"class_id\":2}\n",
    )
    .unwrap();
    let preds = p(dir.path(), "preds.jsonl");
    std::fs::write(
        &preds,
        "{\"video_id\":\"a\",\"start_s\":1.0,\"end_s\":5.0,\"class_id\":1,\"score\":0.9}\n{\"video_id\":\"b\",\"start_s\":3.0,\"end_s\":9.5,\"class_id\":2,\"score\":0.4}\n",
    )
    .unwrap();
    let out = p(dir.path(), "report.json");
    let stdout = ok(&["eval", "--input", &preds, "--gt", &gt, "--output", &out, "--table"]).stdout;
    assert!(String::from_utf8(stdout).unwrap().contains("(0.1:0.7)"));
    let r = report(&out);
    for m in r["metrics"]["map"].as_array().unwrap() {
        assert_eq!(m.as_f64().unwrap(), 1.0);
    }
    assert_eq!(r["metrics"]["avg_0.1_0.7"].as_f64().unwrap(), 1.0);
    assert!(r["timings_ms"].as_object().unwrap().is_empty());
}

#[test]
fn missing_file_exits_2_with_path() {
    let out = wtal(&["eval", "--input", "/nonexistent/preds.jsonl", "--gt", "/nonexistent/gt.jsonl", "--output", "/tmp/x.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/preds.jsonl"));
}

#[test]
fn schema_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = p(dir.path(), "bad.jsonl");
    std::fs::write(&bad, "{\"video_id\":\"a\",\"start_s\":1.0}\n").unwrap();
    let out = wtal(&["fuse", "--input", &bad, "--output", &p(dir.path(), "o.jsonl")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl:1"));
}

#[test]
fn constraint_violation_exits_3_with_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "cfg.json");
    std::fs::write(&cfg, "{\"beta\": 0.7}").unwrap();
    let out = wtal(&["--config", &cfg, "simulate", "--output", &p(dir.path(), "c")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta"));

    let props = p(dir.path(), "props.jsonl");
    std::fs::write(&props, "{\"video_id\":\"v\",\"start_s\":6.0,\"end_s\":2.0,\"score\":1.0,\"class_id\":1}\n").unwrap();
    let out = wtal(&["fuse", "--input", &props, "--output", &p(dir.path(), "o.jsonl")]);
    assert_eq!(out.status.code(), Some(3));

    let out = wtal(&["fuse", "--input", &props, "--output", &p(dir.path(), "o.jsonl"), "--strategy", "median"]);
    assert_eq!(out.status.code(), Some(3));
}

fn perfect_predictions(targets: &str, out: &str) {
    let mut text = String::new();
    for v in lines(targets).into_iter().skip(1) {
        let c = v["class_count"].as_u64().unwrap() as usize;
        let anchors: Vec<Value> = v["anchors"]
            .as_array()
            .unwrap()
            .iter()
            .map(|a| {
                let label = a["class_label"].as_u64().unwrap() as usize;
                let mut probs = vec![0.0; c + 1];
                probs[if label == 0 { c } else { label - 1 }] = 1.0;
                serde_json::json!({"class_probs": probs, "reg_left": a["reg_left"], "reg_right": a["reg_right"]})
            })
            .collect();
        text.push_str(&serde_json::json!({"video_id": v["video_id"], "anchors": anchors}).to_string());
        text.push('\n');
    }
    std::fs::write(out, text).unwrap();
}

#[test]
fn full_chain_with_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = p(d, "cfg.json");
    std::fs::write(&cfg, r#"{"sim": {"num_videos": 4, "seed": 5}}"#).unwrap();
    let sim_dir = d.join("corpus");
    ok(&["--config", &cfg, "simulate", "--output", sim_dir.to_str().unwrap()]);
    let sps = sim_dir.join("sps.jsonl").to_str().unwrap().to_string();
    let gt = sim_dir.join("gt.jsonl").to_str().unwrap().to_string();
    ok(&["--config", &cfg, "extract", "--input", &sps, "--output", &p(d, "props.jsonl")]);
    ok(&["--config", &cfg, "fuse", "--input", &p(d, "props.jsonl"), "--output", &p(d, "pseudo.jsonl")]);
    ok(&["--config", &cfg, "mask", "--input", &p(d, "pseudo.jsonl"), "--output", &p(d, "mask.jsonl"), "--epoch", "29"]);
    ok(&[
        "--config", &cfg, "targets", "--input", &p(d, "pseudo.jsonl"), "--mask", &p(d, "mask.jsonl"), "--output", &p(d, "targets.jsonl"),
    ]);
    perfect_predictions(&p(d, "targets.jsonl"), &p(d, "preds.jsonl"));
    ok(&[
        "--config", &cfg, "losses", "--input", &p(d, "preds.jsonl"), "--targets", &p(d, "targets.jsonl"), "--sps", &sps, "--output",
        &p(d, "losses.json"),
    ]);
    let losses = report(&p(d, "losses.json"));
    assert_eq!(losses["metrics"]["mean"]["cls"].as_f64().unwrap(), 0.0);
    assert!(losses["metrics"]["mean"]["reg"].as_f64().unwrap() < 1e-5);
    assert_eq!(losses["metrics"]["videos"].as_object().unwrap().len(), 4);

    ok(&["--config", &cfg, "eval", "--input", &p(d, "pseudo.jsonl"), "--gt", &gt, "--output", &p(d, "eval.json")]);
    let e = report(&p(d, "eval.json"));
    assert!(e["metrics"]["map"][0].as_f64().unwrap() > 0.3);

    // masks: one record per video, run lengths covering the grid
    let masks = lines(&p(d, "mask.jsonl"));
    let header = &masks[0]["header"];
    for m in &masks[1..] {
        let total: u64 = m["bits"].as_array().unwrap().iter().map(|r| r[1].as_u64().unwrap()).sum();
        let v = m["video_id"].as_str().unwrap();
        assert_eq!(total, header["videos"][v]["num_snippets"].as_u64().unwrap());
    }
}

#[test]
fn benchmark_strategy_subset_and_timings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "cfg.json");
    std::fs::write(&cfg, r#"{"sim": {"num_videos": 3}}"#).unwrap();
    let out: PathBuf = dir.path().join("b.json");
    ok(&["--config", &cfg, "benchmark", "--strategy", "soft", "--timings", "--output", out.to_str().unwrap()]);
    let r = report(out.to_str().unwrap());
    let strategies = r["metrics"]["strategies"].as_object().unwrap();
    assert_eq!(strategies.keys().collect::<Vec<_>>(), vec!["soft"]);
    assert!(r["timings_ms"]["soft"].is_number());
    assert!(r["metrics"]["rng"].as_str().unwrap().contains("ChaCha8"));
}
