//! Regenerates `tests/data/s1_reference.json`: the S1 synthetic pipeline on
//! seeds 1-3, plus the same runs with a shared per-class domain shift.
//!
//! ```text
//! cargo run --release --example s1_reference [out.json]
//! ```

use std::path::PathBuf;

use logit_bridge::pipeline::{run_pipeline, PipelineConfig, RunSummary};

pub const SHIFTED_DOMAIN: f64 = 1.0;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/s1_reference.json"));
    let mut s1 = Vec::new();
    let mut shifted = Vec::new();
    for seed in 1..=3u64 {
        for (shift, dst) in [(0.0, &mut s1), (SHIFTED_DOMAIN, &mut shifted)] {
            let mut cfg = PipelineConfig::seeded(seed);
            cfg.synth.domain_shift = shift;
            let outcome = run_pipeline(&cfg)?;
            let summary = RunSummary::new(&cfg, &outcome);
            println!(
                "seed {seed} shift {shift}: zs {:.2} src {:.2} tm {:.2} naive {:.2} plus {:.2} eft {:.2} ref {:.2} ({:.1}s)",
                summary.zero_shot,
                summary.source_ft,
                summary.transferred,
                summary.naive,
                summary.refined.unwrap_or(f64::NAN),
                summary.eft,
                summary.target_ft,
                outcome.wall_seconds
            );
            dst.push(summary);
        }
    }
    let doc = serde_json::json!({ "s1": s1, "shifted": shifted });
    std::fs::write(&out, serde_json::to_string_pretty(&doc)? + "\n")?;
    println!("wrote {}", out.display());
    Ok(())
}
