//! One function per subcommand. Stages talk to each other only through the
//! files under `out_dir`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use log::{info, warn};
use logit_bridge::adapter::{adapter_init, adapter_load, adapter_serialize, Adapter};
use logit_bridge::banks::{
    cosine_logits, read_bank, synth_generate, write_bank, FeatureBank, LogitBank, Schema, Split,
};
use logit_bridge::eval::{accuracy_of, flops_estimate, format_table, inequality_check, EvalReport, Method};
use logit_bridge::numerics::Matrix;
use logit_bridge::pipeline::{build_schema, few_shot_indices, logits_with_pool, MIN_LOGIT_DIM};
use logit_bridge::training::{extract_adaptation_with, finetune_plus};
use logit_bridge::transfer::{basis_change, eft_logits};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{bank_file, RunConfig};
use crate::manifest::Manifest;

fn out_dir(cfg: &RunConfig) -> anyhow::Result<&Path> {
    let dir = cfg.out_dir.as_path();
    if !dir.is_dir() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", dir.display()),
        )
        .into());
    }
    Ok(dir)
}

fn load(path: &Path, manifest: &mut Manifest<'_>) -> anyhow::Result<FeatureBank> {
    let bank = read_bank(path).with_context(|| format!("reading {}", path.display()))?;
    manifest.input(path)?;
    Ok(bank)
}

fn load_adapter(path: &Path, manifest: &mut Manifest<'_>) -> anyhow::Result<Adapter> {
    let adapter = adapter_load(path).with_context(|| format!("reading {}", path.display()))?;
    manifest.input(path)?;
    Ok(adapter)
}

fn is_strong(role: &str) -> bool {
    role.starts_with("strong")
}

/// Cosine logits of one role and split over `schema`.
fn role_logits(
    cfg: &RunConfig,
    role: &str,
    split: Split,
    schema: &Schema,
    manifest: &mut Manifest<'_>,
) -> anyhow::Result<LogitBank> {
    let bank = load(&cfg.bank_path(role, split), manifest)?;
    let pool_path = if is_strong(role) { cfg.strong_pool_path() } else { cfg.pool_path() };
    if schema.aux_classes().is_empty() {
        return Ok(cosine_logits(&bank, schema)?);
    }
    let pool = load(&pool_path, manifest)?;
    Ok(logits_with_pool(&bank, &pool, schema)?)
}

fn fresh_schema(cfg: &RunConfig, manifest: &mut Manifest<'_>) -> anyhow::Result<Schema> {
    let weak = load(&cfg.bank_path("weak_pt", Split::Train), manifest)?;
    let pool = load(&cfg.pool_path(), manifest)?;
    let n_task = weak.task_classes().len();
    let m = cfg.anchors.m.unwrap_or(MIN_LOGIT_DIM.max(n_task));
    Ok(build_schema(&weak, &pool, m, cfg.anchors.strategy, cfg.anchors.seed)?)
}

/// The schema of the source adapter when one exists, otherwise built from the anchor settings.
fn run_schema(cfg: &RunConfig, manifest: &mut Manifest<'_>) -> anyhow::Result<Schema> {
    let source = cfg.source_adapter();
    if source.exists() {
        Ok(load_adapter(&source, manifest)?.schema)
    } else {
        fresh_schema(cfg, manifest)
    }
}

fn write_adapter(adapter: &Adapter, path: &Path, manifest: &mut Manifest<'_>) -> anyhow::Result<()> {
    adapter_serialize(adapter, path).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(path)?;
    Ok(())
}

fn finish(manifest: Manifest<'_>) -> anyhow::Result<()> {
    let path = manifest.write()?;
    info!("manifest written to {}", path.display());
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = out_dir(cfg)?.join("banks");
    let banks = synth_generate(&cfg.synth)?;
    std::fs::create_dir_all(&dir)?;
    let mut manifest = Manifest::new("synth", cfg);
    let roles = [
        ("weak_pt", &banks.weak_pt),
        ("weak_ft", &banks.weak_ft),
        ("strong_pt", &banks.strong_pt),
        ("strong_ft", &banks.strong_ft_reference),
    ];
    let mut summary = serde_json::Map::new();
    for (role, pair) in roles {
        for (split, bank) in [(Split::Train, &pair.train), (Split::Test, &pair.test)] {
            let path = dir.join(bank_file(role, split));
            write_bank(bank, &path)?;
            manifest.output(&path)?;
        }
        let task = pair.test.task_classes();
        let schema = Schema::new(task.clone(), task.len())?;
        let logits = cosine_logits(&pair.test, &schema)?;
        let (acc, _) = accuracy_of(&logits, &logits.logits, None)?;
        summary.insert(format!("{role}_test_accuracy"), json!(acc));
    }
    for (name, pool) in [("weak_pool", &banks.weak_pool), ("strong_pool", &banks.strong_pool)] {
        let path = dir.join(format!("{name}.fbank"));
        write_bank(pool, &path)?;
        manifest.output(&path)?;
    }
    let acc = |role: &str| summary[&format!("{role}_test_accuracy")].as_f64().unwrap_or(f64::NAN);
    println!(
        "zero-shot test accuracy: weak_pt {:.2}  weak_ft {:.2}  strong_pt {:.2}  strong_ft {:.2}",
        acc("weak_pt"),
        acc("weak_ft"),
        acc("strong_pt"),
        acc("strong_ft")
    );
    manifest.summary = summary.into();
    finish(manifest)
}

pub fn train(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = out_dir(cfg)?;
    let mut manifest = Manifest::new("train", cfg);
    let schema = fresh_schema(cfg, &mut manifest)?;
    let weak_pt = role_logits(cfg, "weak_pt", Split::Train, &schema, &mut manifest)?;
    let weak_ft = role_logits(cfg, "weak_ft", Split::Train, &schema, &mut manifest)?;
    let (adapter, report) = extract_adaptation_with(&weak_pt, &weak_ft, &cfg.train, |step| {
        log::debug!("epoch {} step {} loss {:.6e}", step.epoch, step.step, step.batch_loss);
    })?;

    let adapter_path = cfg.source_adapter();
    write_adapter(&adapter, &adapter_path, &mut manifest)?;
    // Wall time stays out of the file so reruns hash identically.
    let log_path = dir.join("train_log.jsonl");
    let lines: String = report
        .log
        .iter()
        .map(|r| json!({"epoch": r.epoch, "mean_loss": r.mean_loss}).to_string() + "\n")
        .collect();
    std::fs::write(&log_path, lines)?;
    manifest.output(&log_path)?;
    for r in &report.log {
        info!("epoch {:>3}  loss {:.6e}  {:.0} ms", r.epoch, r.mean_loss, r.wall_ms);
    }
    println!(
        "trained {} steps: loss {:.4e} -> {:.4e}, max orthogonality defect {:.2e}",
        report.steps,
        report.initial_loss(),
        report.final_loss(),
        report.max_orthogonality_defect
    );
    manifest.summary = json!({
        "initial_loss": report.initial_loss(),
        "final_loss": report.final_loss(),
        "steps": report.steps,
        "max_orthogonality_defect": report.max_orthogonality_defect,
        "classes": schema.len(),
        "task_classes": schema.n_task(),
    });
    finish(manifest)
}

pub fn transfer(cfg: &RunConfig) -> anyhow::Result<()> {
    out_dir(cfg)?;
    let mut manifest = Manifest::new("transfer", cfg);
    let source = load_adapter(&cfg.source_adapter(), &mut manifest)?;
    let weak = role_logits(cfg, "weak_pt", Split::Train, &source.schema, &mut manifest)?;
    let strong = role_logits(cfg, "strong_pt", Split::Train, &source.schema, &mut manifest)?;
    let transferred = basis_change(&source, &weak, &strong, &cfg.transfer)?;
    write_adapter(&transferred, &cfg.transferred_adapter(), &mut manifest)?;
    let defect = transferred.transition.orthogonality_defect();
    println!(
        "transferred with beta = {} ({}), orthogonality defect {defect:.2e}",
        cfg.transfer.beta, cfg.transfer.mode
    );
    manifest.summary = json!({
        "provenance": transferred.provenance,
        "orthogonality_defect": defect,
    });
    finish(manifest)
}

pub fn finetune(cfg: &RunConfig) -> anyhow::Result<()> {
    out_dir(cfg)?;
    let mut manifest = Manifest::new("finetune", cfg);
    let transferred = load_adapter(&cfg.transferred_adapter(), &mut manifest)?;
    let strong = role_logits(cfg, "strong_pt", Split::Train, &transferred.schema, &mut manifest)?;
    let idx = few_shot_indices(&strong, cfg.finetune.shots)?;
    if idx.is_empty() {
        warn!("no labelled samples selected (shots = {}); adapter written unchanged", cfg.finetune.shots);
    }
    let refined = finetune_plus(&transferred, &strong.select(&idx), &cfg.finetune.plus)?;
    write_adapter(&refined, &cfg.refined_adapter(), &mut manifest)?;
    println!("refined on {} labelled samples ({} per class)", idx.len(), cfg.finetune.shots);
    manifest.summary = json!({ "samples": idx.len(), "shots": cfg.finetune.shots });
    finish(manifest)
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = out_dir(cfg)?;
    let mut manifest = Manifest::new("eval", cfg);
    let schema = run_schema(cfg, &mut manifest)?;
    let needs = |m: Method| cfg.eval.methods.contains(&m);
    let transferred = match needs(Method::Transmiter) {
        true => Some(load_adapter(&cfg.transferred_adapter(), &mut manifest)?),
        false => None,
    };
    let refined = match needs(Method::TransmiterPlus) {
        true => Some(load_adapter(&cfg.refined_adapter(), &mut manifest)?),
        false => None,
    };

    let mut all = Vec::new();
    let mut verdicts = Vec::new();
    let mut table = String::new();
    for &split in &cfg.eval.splits {
        let strong_features = read_bank(cfg.bank_path("strong_pt", split))?;
        let class_split = strong_features
            .class_split()
            .map(|s| (s.base.clone(), s.novel.clone()));
        let subsets = class_split.as_ref().map(|(b, n)| (b.as_slice(), n.as_slice()));
        let mut cache: Vec<(&str, LogitBank)> = Vec::new();
        let mut bank = |role: &'static str, manifest: &mut Manifest<'_>| -> anyhow::Result<LogitBank> {
            if let Some((_, b)) = cache.iter().find(|(r, _)| *r == role) {
                return Ok(b.clone());
            }
            let b = role_logits(cfg, role, split, &schema, manifest)?;
            cache.push((role, b.clone()));
            Ok(b)
        };
        let mut reports = Vec::new();
        for &method in &cfg.eval.methods {
            let (target, logits): (LogitBank, Matrix) = match method {
                Method::ZeroShot => {
                    let b = bank("strong_pt", &mut manifest)?;
                    let l = b.logits.clone();
                    (b, l)
                }
                Method::SourceFt => {
                    let b = bank("weak_ft", &mut manifest)?;
                    let l = b.logits.clone();
                    (b, l)
                }
                Method::TargetFtReference => {
                    let b = bank("strong_ft", &mut manifest)?;
                    let l = b.logits.clone();
                    (b, l)
                }
                Method::Transmiter | Method::TransmiterPlus => {
                    let adapter = if method == Method::Transmiter { &transferred } else { &refined };
                    let adapter = adapter.as_ref().expect("loaded above");
                    let b = bank("strong_pt", &mut manifest)?;
                    let l = adapter.forward(&b.logits)?;
                    (b, l)
                }
                Method::Eft => {
                    let strong = bank("strong_pt", &mut manifest)?;
                    let weak_ft = bank("weak_ft", &mut manifest)?;
                    let weak_pt = bank("weak_pt", &mut manifest)?;
                    let l = eft_logits(
                        &strong.task_logits(),
                        &weak_ft.task_logits(),
                        &weak_pt.task_logits(),
                        cfg.eval.eft_alpha,
                    )?;
                    (strong, l)
                }
            };
            reports.push(EvalReport::evaluate(method, &target, &logits, subsets)?);
        }
        let find = |m: Method| reports.iter().find(|r| r.method == m);
        if let (Some(zs), Some(ft), Some(t)) = (find(Method::ZeroShot), find(Method::SourceFt), find(Method::Transmiter)) {
            let verdict = inequality_check(zs, ft, t, find(Method::TargetFtReference))?;
            println!(
                "[{split}] max(zero_shot, source_ft) <= transmiter: {} (margin {:+.2})",
                pass(verdict.lower.passed),
                verdict.lower.margin
            );
            if let Some(upper) = &verdict.upper {
                println!(
                    "[{split}] transmiter <= target_ft_reference: {} (margin {:+.2})",
                    pass(upper.passed),
                    upper.margin
                );
            }
            verdicts.push(json!({ "split": split, "verdict": verdict }));
        }
        let t = format_table(&reports);
        println!("[{split}]\n{t}");
        table.push_str(&format!("[{split}]\n{t}\n"));
        all.extend(reports);
    }
    let json_path = dir.join("eval.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&json!({ "reports": all, "inequality": verdicts }))? + "\n",
    )?;
    manifest.output(&json_path)?;
    let table_path = dir.join("eval.txt");
    std::fs::write(&table_path, &table)?;
    manifest.output(&table_path)?;
    manifest.summary = json!({ "reports": all.len(), "inequality": verdicts });
    finish(manifest)
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

pub fn bench(cfg: &RunConfig, seed: u64) -> anyhow::Result<()> {
    let dir = out_dir(cfg)?;
    let b = &cfg.bench;
    let adapter = adapter_init(b.d, b.m, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Matrix::from_fn(b.batch, b.m, |_, _| rng.random_range(-1.0..1.0));
    let estimate = flops_estimate(&adapter);
    adapter.forward(&z)?;
    let start = Instant::now();
    for _ in 0..b.iterations {
        std::hint::black_box(adapter.forward(&z)?);
    }
    let per_sample_us = start.elapsed().as_secs_f64() * 1e6 / (b.iterations * b.batch) as f64;
    println!(
        "D = {}, M = {}: {:.4} G MACs ({:.4} G FLOPs) per sample, measured {:.1} us/sample ({} backend)",
        b.d,
        b.m,
        estimate.giga_macs(),
        estimate.giga_flops(),
        per_sample_us,
        if logit_bridge::par::is_parallel() { "rayon" } else { "sequential" }
    );
    let mut manifest = Manifest::new("bench", cfg);
    let path: PathBuf = dir.join("bench.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&json!({
            "d": b.d,
            "m": b.m,
            "batch": b.batch,
            "iterations": b.iterations,
            "macs": estimate.macs,
            "flops": estimate.flops,
            "giga_macs": estimate.giga_macs(),
            "per_sample_us": per_sample_us,
            "parallel": logit_bridge::par::is_parallel(),
        }))? + "\n",
    )?;
    manifest.output(&path)?;
    finish(manifest)
}
