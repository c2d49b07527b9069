//! Command-line front end for the `flowmatch` library.
//!
//! Subcommands: `train`, `sample`, `nll`, `verify`, `trajectories` and
//! `raster`. Exit codes: 0 success, 1 I/O failure, 2 configuration error,
//! 3 numeric failure, 4 failed verification.

pub mod commands;
pub mod config;
pub mod error;
pub mod verify;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "flowmatch", version, about = "Flow Matching for continuous normalizing flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a vector field from a run configuration.
    Train(commands::train::TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(commands::sample::SampleArgs),
    /// Negative log-likelihood or bits per dimension of data.
    Nll(commands::nll::NllArgs),
    /// Run the self-check suite and print a JSON report.
    Verify(commands::verify::VerifyArgs),
    /// Export ODE trajectories as CSV.
    Trajectories(commands::trajectories::TrajectoryArgs),
    /// Render density heatmaps as PGM/PPM images.
    Raster(commands::raster::RasterArgs),
}

/// Solver selection shared by the sampling and likelihood commands.
#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// euler, midpoint, rk4 or dopri5.
    #[arg(long)]
    pub solver: Option<String>,
    /// Evaluation budgets for fixed-step solvers, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub nfe: Vec<usize>,
    #[arg(long)]
    pub atol: Option<f64>,
    #[arg(long)]
    pub rtol: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train::run(a),
        Command::Sample(a) => commands::sample::run(a),
        Command::Nll(a) => commands::nll::run(a),
        Command::Verify(a) => commands::verify::run(a),
        Command::Trajectories(a) => commands::trajectories::run(a),
        Command::Raster(a) => commands::raster::run(a),
    }
}
