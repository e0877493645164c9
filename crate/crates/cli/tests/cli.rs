use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cyclone(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclone")).args(args).output().expect("spawn cyclone")
}

fn ok(args: &[&str]) -> String {
    let out = cyclone(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, n: usize, seed: u64) {
    ok(&["synth", "--out", p(dir), "--n", &n.to_string(), "--size", "32", "--seed", &seed.to_string()]);
}

const FAST: [&str; 8] = ["--input-size", "32", "--epochs", "2", "--steps-per-epoch", "2", "--lr", "0.003"];

#[test]
fn synth_writes_a_reproducible_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 50, 3);
    synth(&b, 50, 3);
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 50);
    assert_eq!(fs::read(a.join("labels.csv")).unwrap(), fs::read(b.join("labels.csv")).unwrap());
    assert!(a.join("run_config.json").is_file());
    assert!(a.join("truth.csv").is_file());

    let c = tmp.path().join("c");
    ok(&["synth", "--out", p(&c), "--n", "80", "--size", "32", "--speed-min", "15", "--speed-max", "60"]);
    let labels = fs::read_to_string(c.join("labels.csv")).unwrap();
    let speeds: Vec<f64> = labels.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(speeds.len(), 80);
    assert!(speeds.iter().all(|&s| (15.0..=60.0).contains(&s)));
}

#[test]
fn split_is_storm_disjoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 120, 1);
    let out = tmp.path().join("split");
    ok(&["split", "--data", p(&data), "--out", p(&out), "--val-fraction", "0.25"]);
    let storms = |f: &str| -> std::collections::BTreeSet<String> {
        fs::read_to_string(out.join(f))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().to_string())
            .collect()
    };
    let (t, v) = (storms("train.csv"), storms("val.csv"));
    assert!(!t.is_empty() && !v.is_empty());
    assert!(t.is_disjoint(&v));
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 240, 5);

    let global = tmp.path().join("global");
    let mut args = vec!["train-global", "--data", p(&data), "--out", p(&global), "--members", "2", "--seed", "7"];
    args.extend(FAST);
    ok(&args);
    let manifest = json(&global.join("model/ensemble.json"));
    assert_eq!(manifest["members"].as_array().unwrap().len(), 2);
    for i in 0..2 {
        let history = fs::read_to_string(global.join(format!("history/member_{i:02}.csv"))).unwrap();
        assert_eq!(history.lines().count(), 3);
    }
    let summary = json(&global.join("summary.json"));

    // Same seed, different worker count: identical results.
    let again = tmp.path().join("again");
    let mut args2 = vec!["train-global", "--data", p(&data), "--out", p(&again), "--members", "2", "--seed", "7", "--jobs", "2"];
    args2.extend(FAST);
    ok(&args2);
    let rerun = json(&again.join("summary.json"));
    let rmse = |v: &Value| v["val"]["rmse"].as_f64().unwrap();
    assert!((rmse(&summary) - rmse(&rerun)).abs() <= 1e-6);

    let eval = tmp.path().join("eval_global");
    let val_labels = global.join("split/val.csv");
    ok(&["evaluate", "--model", p(&global.join("model")), "--data", p(&data), "--labels", p(&val_labels), "--out", p(&eval)]);
    let report = json(&eval.join("report.json"));
    assert_eq!(report["members"], 2);
    assert_eq!(report["model_kind"], "ensemble");
    assert!(fs::read_to_string(eval.join("report.txt")).unwrap().contains("RMSE"));

    let experts = tmp.path().join("experts");
    let global_model = global.join("model");
    let mut args = vec![
        "train-experts", "--gate", p(&global_model), "--data", p(&data), "--out", p(&experts), "--overlap", "third", "--seed", "7",
    ];
    args.extend(FAST);
    ok(&args);
    assert!(experts.join("model/distributed.json").is_file());

    let eval = tmp.path().join("eval_dist");
    ok(&["evaluate", "--model", p(&experts.join("model")), "--data", p(&data), "--labels", p(&val_labels), "--out", p(&eval)]);
    let mut reader = csv::Reader::from_path(eval.join("routing.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let gate: f32 = rec[col("gate_speed")].parse().unwrap();
        let fin: f32 = rec[col("final_speed")].parse().unwrap();
        match rec[col("expert_speed")].parse::<f32>() {
            Ok(expert) => assert_eq!(fin, (gate + expert) / 2.0),
            Err(_) => assert_eq!(fin, gate),
        }
        rows += 1;
    }
    assert!(rows > 0);

    let preds = tmp.path().join("preds");
    let image = data.join("images").join(fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().file_name());
    ok(&["predict", "--model", p(&experts.join("model")), "--out", p(&preds), p(&image)]);
    assert_eq!(fs::read_to_string(preds.join("predictions.csv")).unwrap().lines().count(), 2);

    let explain = tmp.path().join("explain");
    ok(&["explain", "--model", p(&global.join("model")), "--image", p(&image), "--layer", "3", "--out", p(&explain)]);
    for f in ["original.pgm", "member_00_heatmap.pgm", "member_01_heatmap.csv", "median_overlay.ppm", "median_heatmap.csv"] {
        assert!(explain.join(f).is_file(), "{f}");
    }
    let bad = cyclone(&["explain", "--model", p(&global.join("model")), "--image", p(&image), "--layer", "6", "--out", p(&explain)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn overlap_policy_widens_recorded_ranges() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", p(&data), "--n", "150", "--size", "32", "--speed-min", "15", "--speed-max", "60"]);
    let gate = tmp.path().join("gate");
    let mut args = vec!["train-global", "--data", p(&data), "--out", p(&gate), "--members", "1"];
    args.extend(FAST);
    ok(&args);
    let gate_model = gate.join("model");
    let mut ranges = Vec::new();
    for policy in ["none", "third"] {
        let out = tmp.path().join(policy);
        let mut args = vec!["train-experts", "--gate", p(&gate_model), "--data", p(&data), "--out", p(&out), "--overlap", policy];
        args.extend(FAST);
        let run = cyclone(&args);
        assert!(run.status.success());
        assert!(String::from_utf8_lossy(&run.stderr).contains("warning: no training images"));
        let summary = json(&out.join("summary.json"));
        if policy == "none" {
            assert_eq!(summary["experts"], serde_json::json!(["TD", "TS"]));
        }
        ranges.push(summary["ranges"].clone());
    }
    for cat in ["TD", "TS", "H1", "H2", "H3", "H4"] {
        let width = |r: &Value| r["hi"].as_f64().unwrap() - r["lo"].as_f64().unwrap();
        assert!(width(&ranges[1][cat]) > width(&ranges[0][cat]), "{cat}");
    }
}

#[test]
fn oracle_evaluation_is_error_free() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 60, 2);
    let out = tmp.path().join("eval");
    ok(&["evaluate", "--oracle", "--data", p(&data), "--out", p(&out)]);
    let report = json(&out.join("report.json"));
    assert_eq!(report["rmse"], 0.0);
    assert_eq!(report["mae"], 0.0);
    assert_eq!(report["bias"], 0.0);
    assert_eq!(report["f1"], 1.0);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 60, 4);

    let bad_config = tmp.path().join("bad.json");
    fs::write(&bad_config, r#"{"members": 0}"#).unwrap();
    let out = cyclone(&["train-global", "--config", p(&bad_config), "--data", p(&data), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = cyclone(&["evaluate", "--oracle", "--data", p(&tmp.path().join("missing")), "--out", p(&tmp.path().join("y"))]);
    assert_eq!(out.status.code(), Some(3));

    let out = cyclone(&[
        "train-global", "--data", p(&data), "--out", p(&tmp.path().join("z")), "--members", "1", "--input-size", "32", "--epochs", "20", "--lr",
        "1e12", "--val-fraction", "0",
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    let out = cyclone(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"synth": {"n": 30, "size": 32, "seed": 9}}"#).unwrap();
    let out = tmp.path().join("s");
    ok(&["synth", "--config", p(&cfg), "--n", "12", "--out", p(&out)]);
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 12);
    let recorded = json(&out.join("run_config.json"));
    assert_eq!(recorded["synth"]["n"], 12);
    assert_eq!(recorded["synth"]["seed"], 9);
}
