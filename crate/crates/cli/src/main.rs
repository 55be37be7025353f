//! `advlab`: reproducible runs of the circles experiments.
//!
//! Exit status: 0 success, 1 verification failure, 2 usage error, 3 I/O or
//! parse error.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] advlab_core::Error),
}

impl CliError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::Io(format!("{}: {err}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        use advlab_core::Error as E;
        match self {
            Self::Verification(_) => 1,
            Self::Usage(_) => 2,
            Self::Io(_) => 3,
            Self::Core(E::Config(_) | E::Shape { .. } | E::Domain(_)) => 2,
            Self::Core(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "advlab", version, about = "Targeted attacks, gradient heat maps and detectors on a 2-D classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the circles data set and train the 50-unit classifier.
    TrainCircles(commands::TrainArgs),
    /// Run targeted attacks from every eligible data point.
    Attack(commands::AttackCmdArgs),
    /// Gradient-magnitude heat maps over the square.
    Heatmap(commands::HeatmapArgs),
    /// Check the gradient decomposition bounds at random points.
    Verify(commands::VerifyArgs),
    /// Train genuine-versus-adversarial detectors.
    Detector(commands::DetectorArgs),
}

/// Flags accepted by every subcommand.
#[derive(Debug, Args)]
pub struct Shared {
    /// Flat `key = value` file; command-line flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: out].
    #[arg(long)]
    pub out: Option<String>,
    /// Base seed for every named seed that is not set explicitly [default: 0].
    #[arg(long)]
    pub seed: Option<String>,
    /// Worker threads [default: available parallelism]. Results do not depend on it.
    #[arg(long)]
    pub workers: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::TrainCircles(a) => commands::train_circles(a),
        Command::Attack(a) => commands::attack(a),
        Command::Heatmap(a) => commands::heatmap(a),
        Command::Verify(a) => commands::verify(a),
        Command::Detector(a) => commands::detector(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
