// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end for the workbench experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use boxcircuit_core::runner::{run_experiment, ExperimentConfig, ExperimentKind};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(version, about = "Localization-circuit workbench on a synthetic grid world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene manifest with control pairs.
    Gen(RunArgs),
    /// Build the planted-circuit model and write its checkpoint.
    Plant(RunArgs),
    /// Train a model from random init on the scene set.
    Train(RunArgs),
    /// Score localization, classification and control false positives.
    Eval(RunArgs),
    /// Token ablation, containerization and shuffle experiments.
    Ablate(RunArgs),
    /// Per-layer linear position probes.
    Probe(RunArgs),
    /// Attention knockout from answer positions to object tokens.
    Knockout(RunArgs),
    /// Per-head causal mediation analysis.
    Cma(RunArgs),
    /// Cumulative head ablation curves.
    HeadAblate(RunArgs),
    /// Collect earlier runs into one table.
    Report(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn split(self) -> (ExperimentKind, RunArgs) {
        match self {
            Self::Gen(a) => (ExperimentKind::Gen, a),
            Self::Plant(a) => (ExperimentKind::Plant, a),
            Self::Train(a) => (ExperimentKind::Train, a),
            Self::Eval(a) => (ExperimentKind::Eval, a),
            Self::Ablate(a) => (ExperimentKind::Ablate, a),
            Self::Probe(a) => (ExperimentKind::Probe, a),
            Self::Knockout(a) => (ExperimentKind::Knockout, a),
            Self::Cma(a) => (ExperimentKind::Cma, a),
            Self::HeadAblate(a) => (ExperimentKind::HeadAblate, a),
            Self::Report(a) => (ExperimentKind::Report, a),
        }
    }
}

fn run(kind: ExperimentKind, args: RunArgs) -> anyhow::Result<()> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.out = Some(out);
    }
    let record = run_experiment(&config, kind)?;
    print!("{}", record.summary_table());
    Ok(())
}

fn main() -> ExitCode {
    let (kind, args) = Cli::parse().command.split();
    match run(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": {
                    "kind": kind.name(),
                    "message": e.to_string(),
                    "chain": e.chain().skip(1).map(ToString::to_string).collect::<Vec<_>>(),
                }
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
