//! The `editlab` experiment runner.
//!
//! Every subcommand resolves one [`config::ExperimentConfig`], writes into
//! its output directory, and leaves behind the frozen config, its hash and a
//! manifest of the artifacts it produced.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub use config::{resolve, ExperimentConfig, Resolved};

#[derive(Debug, Parser)]
#[command(name = "editlab", version, about = "Fine-tuning based knowledge editing experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override such as `edit.batch_size=8` (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the fact world, edit set and capability probes.
    GenData,
    /// Pretrain the base model and measure its capability baseline.
    Pretrain,
    /// Apply the edit set with the configured pipeline.
    Edit,
    /// Shard dynamics: depth-first and breadth-first from the same base.
    Dynamics,
    /// Edit at every (layer, selector) location and select one.
    Sweep,
    /// Breadth-first editing over edits arriving in chunks.
    Stream,
    /// Transfer a tuning location to a model of another depth.
    ScaleHeuristic,
    /// Re-evaluate the edited checkpoint.
    Eval,
    /// Join every results.csv under the output directory.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Edit => "edit",
            Command::Dynamics => "dynamics",
            Command::Sweep => "sweep",
            Command::Stream => "stream",
            Command::ScaleHeuristic => "scale-heuristic",
            Command::Eval => "eval",
            Command::Report => "report",
        }
    }
}

/// Runs one subcommand under an already resolved configuration.
pub fn execute(command: Command, resolved: &Resolved) -> Result<()> {
    let mut run = artifacts::Run::start(resolved, command.name())?;
    match command {
        Command::GenData => commands::gen_data(&mut run)?,
        Command::Pretrain => commands::pretrain(&mut run)?,
        Command::Edit => commands::edit(&mut run)?,
        Command::Dynamics => commands::dynamics(&mut run)?,
        Command::Sweep => commands::sweep(&mut run)?,
        Command::Stream => commands::stream(&mut run)?,
        Command::ScaleHeuristic => commands::scale_heuristic(&mut run)?,
        Command::Eval => commands::evaluate(&mut run)?,
        Command::Report => commands::report(&mut run)?,
    }
    run.finish()
}

pub fn run(cli: Cli) -> Result<()> {
    let resolved = resolve(cli.config.as_deref(), &cli.overrides, cli.seed, cli.out.as_deref())?;
    execute(cli.command, &resolved)
}
