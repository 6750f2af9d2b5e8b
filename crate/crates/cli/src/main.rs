//! Command-line driver: one pipeline stage per invocation.
//!
//! Exit codes: 0 success, 1 numeric failure, 2 validation failure,
//! 3 IO or format failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use logit_bridge::eval::Method;
use logit_bridge::Error;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "logit-bridge", version, about = "Extract, transfer and evaluate logit-space adapters")]
struct Cli {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (must exist).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic feature banks for all four model roles.
    Synth,
    /// Extract the adapter from the weak pre-trained / fine-tuned pair.
    Train,
    /// Move the source adapter onto the strong model.
    Transfer {
        /// Regularization toward the identity basis map.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Score methods on the configured splits and check the transfer inequality.
    Eval {
        /// Comma-separated methods, e.g. zero_shot,source_ft,transmiter.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
    },
    /// Refine the transferred adapter on labelled strong-model samples.
    Finetune {
        /// Labelled samples per class.
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Analytic cost and measured forward latency of a fresh adapter.
    Bench {
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
    },
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    match &cli.command {
        Command::Transfer { beta: Some(beta) } => cfg.transfer.beta = *beta,
        Command::Eval { methods: Some(methods) } => cfg.eval.methods = methods.clone(),
        Command::Finetune { shots: Some(shots) } => cfg.finetune.shots = *shots,
        Command::Bench { d, m } => {
            if let Some(m) = m {
                cfg.bench.m = *m;
                cfg.bench.d = cfg.bench.d.max(*m);
            }
            if let Some(d) = d {
                cfg.bench.d = *d;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Transfer { .. } => commands::transfer(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Finetune { .. } => commands::finetune(&cfg),
        Command::Bench { .. } => commands::bench(&cfg, cli.seed.unwrap_or(cfg.train.seed)),
    }
}

/// Map an error chain to the documented exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NumericFailure { .. } => 1,
                Error::InvalidArgument(_)
                | Error::MissingClass(_)
                | Error::Capacity { .. }
                | Error::SchemaMismatch { .. } => 2,
                Error::Format { .. } | Error::Io(_) => 3,
                Error::Json(_) => 2,
            };
        }
        if cause.is::<serde_json::Error>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
