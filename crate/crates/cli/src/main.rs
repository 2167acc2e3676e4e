//! `fmch`: phantom generation, pre-training, few-shot fine-tuning, probes and
//! file inspection from one entry point.
//!
//! Human-readable output goes to stdout; failures are reported on stderr as
//! a single JSON object. Exit codes: 0 ok, 1 runtime, 2 usage, 3 resume
//! config mismatch.

mod commands;
mod run_dir;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "fmch", version, about = "Partitioned-latent MAE pre-training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-contrast dataset.
    Phantom(PhantomArgs),
    /// Pre-train a network from a JSON config.
    Pretrain(PretrainArgs),
    /// Few-shot fine-tuning from a checkpoint against a random-init baseline.
    Finetune(FinetuneArgs),
    /// Aggregate the metric reports found in a run directory.
    Evaluate(EvaluateArgs),
    /// Linear probes on pooled latents.
    Probe(ProbeArgs),
    /// Print header, intensity statistics and label histogram of a NIfTI file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long)]
    subjects: usize,
    #[arg(long, value_delimiter = ',', default_value = "c1,c2")]
    contrasts: Vec<String>,
    #[arg(long, default_value_t = 1)]
    timepoints: u32,
    /// Cubic extent in voxels.
    #[arg(long, default_value_t = 24)]
    shape: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lesion_prevalence: Option<f64>,
    #[arg(long)]
    out: std::path::PathBuf,
    /// Validate arguments without writing anything.
    #[arg(long)]
    check: bool,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    config: std::path::PathBuf,
    #[arg(long)]
    resume: Option<std::path::PathBuf>,
    /// Overrides the config's loss weights with the variant defaults.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Resume even if the checkpoint was written under another config.
    #[arg(long)]
    allow_config_mismatch: bool,
    /// Run directory (default: under $FMCH_RUN_ROOT or ./runs).
    #[arg(long)]
    out: Option<std::path::PathBuf>,
    #[arg(long)]
    check: bool,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: std::path::PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 4)]
    k_shot: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Dataset manifest (default: the one named in the checkpoint config).
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Backbone learning rate (default: a tenth of the pre-training rate).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: Option<std::path::PathBuf>,
    #[arg(long)]
    check: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: std::path::PathBuf,
    #[arg(long)]
    check: bool,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: std::path::PathBuf,
    #[arg(long)]
    factor: String,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as JSON into this directory.
    #[arg(long)]
    out: Option<std::path::PathBuf>,
    #[arg(long)]
    check: bool,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    file: std::path::PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(CliError::usage("arguments", e.to_string().trim().to_owned())),
    };
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Probe(a) => commands::probe(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.code)
}
