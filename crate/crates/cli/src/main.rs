//! `lio`: run the odometry pipeline, generate synthetic sequences and score
//! trajectories.
//!
//! Exit codes: 0 success, 1 other I/O failure, 2 parse or validation error,
//! 3 missing input file, 4 estimator divergence, 5 empty sequence, 6 the
//! evaluated trajectories do not overlap.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "lio", version, about = "LiDAR-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the trajectory of a recorded or simulated sequence.
    Run(RunArgs),
    /// Generate a synthetic sequence from scene and trajectory specs.
    Sim(SimArgs),
    /// Score an estimated trajectory against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// Sequence directory containing `manifest.txt`.
    #[arg(long)]
    pub sequence: PathBuf,
    /// Output directory, created if absent.
    #[arg(long)]
    pub output: PathBuf,
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads for intra-scan parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Single-threaded, no wall-time budget, no timing in diagnostics.
    #[arg(long)]
    pub deterministic: bool,
    /// Write the final map as `x y z primitive` lines to `map.txt`.
    #[arg(long)]
    pub dump_map: bool,
    /// Write dominant-primitive counts and percentages to `primitives.txt`.
    #[arg(long)]
    pub dump_primitives: bool,
}

#[derive(Debug, clap::Args)]
pub struct SimArgs {
    /// Scene spec (TOML): a `preset` table and/or `[[primitive]]` entries.
    #[arg(long)]
    pub scene: PathBuf,
    /// Trajectory spec (TOML).
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Simulation settings (TOML): duration, seed, sensor, lidar, imu.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output sequence directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Overrides the seed from the settings file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Largest stamp difference accepted when pairing poses, in seconds.
    #[arg(long, default_value_t = 0.02)]
    pub max_dt: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), CliError> = match cli.command {
        Command::Run(a) => commands::run(&a),
        Command::Sim(a) => commands::sim(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
