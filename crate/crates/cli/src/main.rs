mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Unsupervised multi-scale deformable registration for CBCT volumes.
#[derive(Debug, Parser)]
#[command(name = "dirforge", version)]
struct Cli {
    /// Worker threads for patch inference.
    #[arg(long, global = true, env = "DIRFORGE_WORKERS", default_value_t = 1)]
    workers: usize,

    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom pair with ground truth.
    Phantom(PhantomArgs),
    /// Train the global and local networks.
    Train(TrainArgs),
    /// Register a moving volume to a target volume.
    Register(RegisterArgs),
    /// Compute registration metrics.
    Evaluate(EvaluateArgs),
    /// Summarise a container file.
    Info(InfoArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Phantom specification JSON.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the specification.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Manifest with a "pairs" list (as written by `phantom`).
    #[arg(long)]
    pairs: PathBuf,
    /// Training configuration JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    deformed: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    dvf: PathBuf,
    #[arg(long)]
    landmarks_moving: PathBuf,
    #[arg(long)]
    landmarks_target: PathBuf,
    /// Report path; `.csv` and `.json` are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = dirforge::volume::BODY_HU, allow_negative_numbers = true)]
    body_hu: f32,
    #[arg(long, default_value_t = dirforge::volume::BONE_HU, allow_negative_numbers = true)]
    bone_hu: f32,
    /// Row label in the report.
    #[arg(long, default_value = "fraction")]
    fraction: String,
}

#[derive(Debug, Args)]
struct InfoArgs {
    #[arg(long)]
    file: PathBuf,
    /// Write one axial slice as a PGM image, e.g. `z=12`.
    #[arg(long)]
    slice: Option<String>,
    /// Destination of the slice image (default: next to the input).
    #[arg(long, requires = "slice")]
    slice_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .init();

    let outcome = std::panic::catch_unwind(|| commands::run(&cli));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
        Err(_) => ExitCode::from(3),
    }
}
