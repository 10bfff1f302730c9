//! `snapture`: profile, snapshot, synth, train, eval and report subcommands.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{EvalArgs, SynthArgs};
use crate::config::{CommonArgs, RunConfig};

#[derive(Parser)]
#[command(name = "snapture", version, about = "Hybrid static/dynamic hand-gesture toolkit")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-frame ISSIM profiles, thirds summary and gate decisions
    Profile,
    /// Peak-frame hand snapshots of gate-enabled sequences
    Snapshot,
    /// Render a synthetic corpus and its manifest
    Synth {
        /// benchmark or grit_like
        #[arg(long, default_value = "benchmark")]
        preset: String,
        /// JSON generator config; replaces the preset
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Train one model per split and save checkpoints
    Train,
    /// Evaluate a saved checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split JSON written by `train`; its test part is evaluated
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Repeated trials of every variant with summary statistics
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let run = || -> anyhow::Result<bool> {
        let cfg = RunConfig::resolve(&cli.common)?;
        let outcome = match &cli.command {
            Command::Profile => commands::profile(&cfg)?,
            Command::Snapshot => commands::snapshot(&cfg)?,
            Command::Synth {
                preset,
                spec,
                per_class,
            } => commands::synth(
                &cfg,
                &SynthArgs {
                    preset: preset.clone(),
                    spec: spec.clone(),
                    per_class: *per_class,
                },
            )?,
            Command::Train => commands::train(&cfg)?,
            Command::Eval { checkpoint, split } => commands::eval(
                &cfg,
                &EvalArgs {
                    checkpoint: checkpoint.clone(),
                    split: split.clone(),
                },
            )?,
            Command::Report => commands::report(&cfg)?,
        };
        Ok(outcome.success(cfg.strict))
    };
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
