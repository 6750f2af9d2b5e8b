use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use logit_bridge::adapter::adapter_load;
use logit_bridge::numerics::Matrix;
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_logit-bridge"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = bin();
    cmd.arg("--out").arg(dir).args(args);
    cmd.output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A small run so every stage takes well under a second.
fn small_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "synth": {
            "latent_dim": 16, "n_classes": 6, "samples_per_class": 20,
            "test_samples_per_class": 20, "n_aux_candidates": 40
        },
        "anchors": {"M": 16},
        "train": {"epochs": 3, "batch_size": 32},
        "finetune": {"shots": 4, "batch_size": 8, "epochs": 2},
        "bench": {"d": 32, "m": 32, "batch": 8, "iterations": 2}
    });
    merge(&mut cfg, &extra);
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn merge(a: &mut Value, b: &Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b.clone(),
    }
}

fn manifest(dir: &Path, command: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("manifest_{command}.json"))).unwrap()).unwrap()
}

fn output_hashes(dir: &Path, command: &str) -> Vec<String> {
    manifest(dir, command)["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["sha256"].as_str().unwrap().to_string())
        .collect()
}

fn with_config(cfg: &Path, args: &[&str]) -> Vec<String> {
    let mut v = vec!["--config".to_string(), cfg.display().to_string()];
    v.extend(args.iter().map(|s| s.to_string()));
    v
}

fn ok_cfg(dir: &Path, cfg: &Path, args: &[&str]) -> String {
    let args = with_config(cfg, args);
    ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn synth_is_deterministic_and_needs_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), json!({}));
    ok_cfg(tmp.path(), &cfg, &["--seed", "1", "synth"]);
    let first = output_hashes(tmp.path(), "synth");
    assert_eq!(first.len(), 10);
    ok_cfg(tmp.path(), &cfg, &["--seed", "1", "synth"]);
    assert_eq!(output_hashes(tmp.path(), "synth"), first);
    ok_cfg(tmp.path(), &cfg, &["--seed", "2", "synth"]);
    assert_ne!(output_hashes(tmp.path(), "synth"), first);

    let out = run(&tmp.path().join("missing"), &["synth"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn full_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir, json!({}));
    ok_cfg(dir, &cfg, &["--seed", "3", "synth"]);
    let trained = ok_cfg(dir, &cfg, &["--seed", "3", "train"]);
    assert!(trained.contains("trained"), "{trained}");
    let first = output_hashes(dir, "train");
    ok_cfg(dir, &cfg, &["--seed", "3", "train"]);
    assert_eq!(output_hashes(dir, "train"), first, "rerun must reproduce adapter and log");

    let log = std::fs::read_to_string(dir.join("train_log.jsonl")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["mean_loss"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 4);
    assert!(losses.last() < losses.first());

    ok_cfg(dir, &cfg, &["--seed", "3", "transfer"]);
    let provenance = &manifest(dir, "transfer")["summary"]["provenance"];
    assert_eq!(provenance["beta"], json!(500.0));
    assert_eq!(provenance["mode"], json!("basis_change"));
    ok_cfg(dir, &cfg, &["--seed", "3", "transfer", "--beta", "7"]);
    assert_eq!(manifest(dir, "transfer")["summary"]["provenance"]["beta"], json!(7.0));

    ok_cfg(dir, &cfg, &["--seed", "3", "finetune"]);
    let printed = ok_cfg(dir, &cfg, &["--seed", "3", "eval"]);
    assert!(printed.contains("transmiter_plus"), "{printed}");
    let eval: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["reports"].as_array().unwrap().len(), 6);
    assert_eq!(eval["inequality"].as_array().unwrap().len(), 1);
    assert!(dir.join("eval.txt").exists());
}

#[test]
fn self_transfer_keeps_the_source_adapter() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let banks = dir.join("banks");
    let weak = |split: &str| banks.join(format!("weak_pt_{split}.fbank"));
    let cfg = small_config(
        dir,
        json!({
            "banks": {"strong_pt": {"train": weak("train"), "test": weak("test")}},
            "anchors": {"strong_pool_path": banks.join("weak_pool.fbank")}
        }),
    );
    ok_cfg(dir, &cfg, &["synth"]);
    ok_cfg(dir, &cfg, &["train"]);
    ok_cfg(dir, &cfg, &["transfer"]);
    let source = adapter_load(dir.join("source.tmad")).unwrap();
    let transferred = adapter_load(dir.join("transferred.tmad")).unwrap();
    let probe = Matrix::from_fn(32, 16, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
    let diff = source
        .forward(&probe)
        .unwrap()
        .max_abs_diff(&transferred.forward(&probe).unwrap());
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn schema_mismatch_is_a_validation_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let cfg_a = small_config(&a, json!({}));
    ok_cfg(&a, &cfg_a, &["synth"]);
    ok_cfg(&a, &cfg_a, &["train"]);
    let cfg_b = small_config(
        &b,
        json!({"synth": {"n_classes": 4}, "adapters": {"source": a.join("source.tmad")}}),
    );
    ok_cfg(&b, &cfg_b, &["synth"]);
    let args = with_config(&cfg_b, &["transfer"]);
    let out = run(&b, &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('`'), "class should be named: {err}");
}

#[test]
fn usage_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["eval", "--methods", "zero_shot,unknown"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown method"));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochs": 0}}"#).unwrap();
    let out = run(tmp.path(), &["--config", bad.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(tmp.path(), &["--config", "/nonexistent/config.json", "train"]);
    assert_eq!(out.status.code(), Some(3));

    // Stage inputs missing.
    let out = run(tmp.path(), &["train"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_adapter_is_a_format_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir, json!({}));
    ok_cfg(dir, &cfg, &["synth"]);
    std::fs::write(dir.join("source.tmad"), b"not an adapter").unwrap();
    let args = with_config(&cfg, &["transfer"]);
    let out = run(dir, &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn zero_shots_leave_the_adapter_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir, json!({}));
    ok_cfg(dir, &cfg, &["synth"]);
    ok_cfg(dir, &cfg, &["train"]);
    ok_cfg(dir, &cfg, &["transfer"]);
    let args = with_config(&cfg, &["finetune", "--shots", "0"]);
    let out = run(dir, &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("WARN"));
    assert_eq!(
        std::fs::read(dir.join("refined.tmad")).unwrap(),
        std::fs::read(dir.join("transferred.tmad")).unwrap()
    );
}

#[test]
fn zero_shot_on_noiseless_banks_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(
        dir,
        json!({"synth": {"eta_weak": 0.0, "eta_strong": 0.0, "epsilon": 0.0}}),
    );
    ok_cfg(dir, &cfg, &["synth"]);
    let printed = ok_cfg(dir, &cfg, &["eval", "--methods", "zero_shot"]);
    assert!(printed.contains("100.00"), "{printed}");
    let eval: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["reports"][0]["accuracy"], json!(100.0));
}

#[test]
fn bench_reports_the_analytic_cost() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = small_config(dir, json!({"bench": {"batch": 1, "iterations": 1}}));
    let printed = ok_cfg(dir, &cfg, &["bench", "--d", "1024", "--m", "1024"]);
    assert!(printed.contains("0.0105 G MACs"), "{printed}");
    assert!(printed.contains("us/sample"), "{printed}");
    let b: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("bench.json")).unwrap()).unwrap();
    assert_eq!(b["macs"], json!(10_485_760u64));
}

/// The stage-by-stage CLI run on S1 must agree with the in-memory pipeline.
#[test]
fn s1_through_the_cli_matches_the_reference_run() {
    #[derive(serde::Deserialize)]
    struct Reference {
        s1: Vec<logit_bridge::pipeline::RunSummary>,
    }
    let reference: Reference =
        serde_json::from_str(include_str!("../../core/tests/data/s1_reference.json")).unwrap();
    let pinned = &reference.s1[0];

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let summary = ok(dir, &["--seed", "1", "synth"]);
    assert!(summary.contains(&format!("weak_pt {:.2}", pinned.weak_zero_shot)), "{summary}");
    assert!(summary.contains(&format!("weak_ft {:.2}", pinned.source_ft)), "{summary}");
    assert!(pinned.source_ft > pinned.weak_zero_shot);

    ok(dir, &["--seed", "1", "train"]);
    let train = manifest(dir, "train");
    assert_eq!(train["summary"]["initial_loss"].as_f64().unwrap(), pinned.initial_loss);
    assert_eq!(train["summary"]["final_loss"].as_f64().unwrap(), pinned.final_loss);
    ok(dir, &["--seed", "1", "transfer"]);
    ok(dir, &["--seed", "1", "eval", "--methods", "zero_shot,source_ft,transmiter"]);
    let eval: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    let acc = |i: usize| eval["reports"][i]["accuracy"].as_f64().unwrap();
    assert_eq!((acc(0), acc(1), acc(2)), (pinned.zero_shot, pinned.source_ft, pinned.transferred));
    let lower = &eval["inequality"][0]["verdict"]["lower"];
    assert_eq!(lower["passed"].as_bool().unwrap(), pinned.transferred >= pinned.zero_shot.max(pinned.source_ft));
}
