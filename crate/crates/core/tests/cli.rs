use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MODEL: &str = r#"{"image_size": 16, "patch_size": 2, "embed_dim": 8, "depths": [1, 1], "num_heads": [2, 2],
  "window_size": 4, "mlp_ratio": 2, "num_classes": 7, "use_shift": true, "use_rel_pos_bias": true,
  "sex_vocab": 3, "age_vocab": 22, "loc_vocab": 16, "fusion_weights": [0.85, 0.05, 0.05, 0.05], "seed": 1}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skewprune"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn skewprune")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["report", "--config", "missing.json"]).status.code(), Some(2));
    fs::write(dir.path().join("bad.json"), "{\"model\": 3}").unwrap();
    assert_eq!(run(dir.path(), &["report", "--config", "bad.json"]).status.code(), Some(2));
    // a well-formed file whose values violate model invariants
    let bad = MODEL.replace("\"image_size\": 16", "\"image_size\": 15");
    fs::write(dir.path().join("invalid.json"), format!("{{\"model\": {bad}}}")).unwrap();
    let out = run(dir.path(), &["train", "--config", "invalid.json", "--data", ".", "--out", "m", "--history", "h"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: ") && err.lines().count() == 1, "{err}");
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.skpr"), b"not a checkpoint").unwrap();
    let out = run(dir.path(), &["report", "--ckpt", "m.skpr"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

/// Closed-form parameter count of an unpruned model.
fn closed_form_params(e0: usize, depths: &[usize], heads: &[usize], w: usize, r: usize, p: usize, k: usize) -> usize {
    let mut total = 3 * p * p * e0 + 3 * e0;
    let side = 2 * w - 1;
    for (s, (&depth, &h)) in depths.iter().zip(heads).enumerate() {
        let e = e0 << s;
        let block = (4 + 2 * r) * e * e + (9 + r) * e + side * side * h;
        total += depth * block;
        if s + 1 < depths.len() {
            total += 8 * e * e + 8 * e;
        }
    }
    let f = e0 << (depths.len() - 1);
    total + 2 * f + (3 + 22 + 16) * f + f * k + k
}

#[test]
fn report_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.json"), format!("{{\"model\": {MODEL}}}")).unwrap();
    let v = stdout_json(&run(dir.path(), &["report", "--config", "t.json"]));
    assert_eq!(v["params"], closed_form_params(8, &[1, 1], &[2, 2], 4, 2, 2, 7));
    assert_eq!(v["buffers"], 0);
    assert_eq!(v["memory_mb"].as_f64().unwrap() * (1 << 20) as f64, (4 * v["params"].as_u64().unwrap()) as f64);

    let default = serde_json::to_string(&skewprune::ModelConfig::default()).unwrap();
    fs::write(dir.path().join("d.json"), format!("{{\"model\": {default}}}")).unwrap();
    let v = stdout_json(&run(dir.path(), &["report", "--config", "d.json"]));
    assert_eq!(v["params"], closed_form_params(32, &[2, 2], &[2, 4], 4, 4, 4, 7));
}

#[test]
fn train_eval_prune_and_effects_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("synth.json"), r#"{"n": 70, "image_size": 16, "seed": 2}"#).unwrap();
    fs::write(
        d.join("train.json"),
        format!(r#"{{"model": {MODEL}, "train": {{"epochs": 2, "batch_size": 16}}}}"#),
    )
    .unwrap();
    assert!(run(d, &["data", "synth", "--config", "synth.json", "--out", "data"]).status.success());
    assert!(d.join("data/metadata.csv").exists());
    let out = run(d, &["train", "--config", "train.json", "--data", "data", "--out", "m.skpr", "--history", "h.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let hist: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("h.json")).unwrap()).unwrap();
    let final_acc = hist["history"]["final_train_accuracy"].as_f64().unwrap();
    let ev = stdout_json(&run(d, &["eval", "--ckpt", "m.skpr", "--data", "data"]));
    assert_eq!(ev["accuracy"].as_f64().unwrap(), final_acc);
    assert_eq!(ev["samples"], 70);

    let report = stdout_json(&run(d, &["report", "--ckpt", "m.skpr"]));
    assert_eq!(report["size_bytes"].as_u64().unwrap(), fs::metadata(d.join("m.skpr")).unwrap().len());

    fs::write(d.join("prune.json"), r#"{"schedule": {"stages": [{"stage": 0, "finetune_epochs": 0}]}}"#).unwrap();
    let out = run(
        d,
        &["prune", "--ckpt", "m.skpr", "--calib", "data", "--train", "data", "--schedule", "prune.json", "--out", "p.skpr", "--report", "rep"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stage0 = fs::read_to_string(d.join("rep/stage_0.txt")).unwrap();
    assert!(stage0.contains("skew="), "{stage0}");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("rep/summary.json")).unwrap()).unwrap();
    assert!(summary["params_after"].as_u64() <= summary["params_before"].as_u64());

    fs::write(
        d.join("fl.json"),
        format!(r#"{{"model": {MODEL}, "fl": {{"num_clients": 2, "rounds": 2, "prune_schedule": {{"0": [0]}}}}}}"#),
    )
    .unwrap();
    assert!(run(d, &["fl", "run", "--config", "fl.json", "--data", "data", "--out", "fl"]).status.success());
    let rounds = fs::read_to_string(d.join("fl/rounds.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 2);
    assert!(d.join("fl/prune_round_0.txt").exists());
    let out = run(d, &["fl", "effects", "--out", "fl"]);
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.lines().next().unwrap().starts_with("metric"), "{table}");
    assert!(d.join("fl/effects.json").exists());
}
