//! `certiformer`: certified robustness radii for Transformer classifiers.
//!
//! Exit codes: 0 success (misclassified inputs are flagged in the report),
//! 1 runtime failure, 2 invalid configuration, 3 unreadable model.

mod commands;
mod config;
mod report;

use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{Format, GenArgs, RunArgs, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Verify(#[from] certiformer::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Model(_) => 3,
            CliError::Verify(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "certiformer", version, about = "Certified robustness radii for Transformer classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certified radius for every position set of every input.
    Certify(RunArgs),
    /// Per-word importance from certified radii, substitution bounds and gradients.
    Importance(RunArgs),
    /// Compare fully-forward, fully-backward and backward-forward bounding.
    Ablate(RunArgs),
    /// Write a generated model, weights and vocabulary.
    GenFixture(GenArgs),
}

fn emit<R: Serialize>(cfg: &RunConfig, report: &R, table: impl FnOnce() -> String) -> Result<(), CliError> {
    let text = match cfg.format {
        Format::Json => serde_json::to_string_pretty(report).expect("reports serialize") + "\n",
        Format::Table => table(),
    };
    match &cfg.out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn configure_threads(cfg: &RunConfig) -> Result<(), CliError> {
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Certify(args) => {
            let cfg = RunConfig::resolve(&args, false)?;
            configure_threads(&cfg)?;
            let report = commands::certify(&cfg)?;
            emit(&cfg, &report, || report.to_table())
        }
        Command::Importance(args) => {
            let cfg = RunConfig::resolve(&args, false)?;
            configure_threads(&cfg)?;
            let report = commands::importance(&cfg)?;
            emit(&cfg, &report, || report.to_table())
        }
        Command::Ablate(args) => {
            let cfg = RunConfig::resolve(&args, true)?;
            configure_threads(&cfg)?;
            let report = commands::ablate(&cfg)?;
            emit(&cfg, &report, || report.to_table())
        }
        Command::GenFixture(args) => {
            let summary = commands::gen_fixture(&args)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("certiformer: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
