//! `stenosis`: phantom generation, sequence building, cross-validated
//! training, evaluation, prediction and reporting.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.
//! Failures print one line prefixed `error[config]:` or `error[runtime]:`.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl From<stenosis_core::Error> for CliError {
    fn from(e: stenosis_core::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Single line so callers can parse it.
        let (tag, msg) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        write!(f, "error[{tag}]: {}", msg.replace('\n', " "))
    }
}

#[derive(Parser)]
#[command(name = "stenosis", version, about = "Stenosis detection on straightened vessel volumes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Default)]
pub struct SamplingFlags {
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    cube_side: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Maximum jitter in voxels (0 disables).
    #[arg(long)]
    jitter: Option<usize>,
    #[arg(long, overrides_with = "no_rotate")]
    rotate: bool,
    #[arg(long)]
    no_rotate: bool,
    #[arg(long, overrides_with = "no_balance")]
    balance: bool,
    #[arg(long)]
    no_balance: bool,
}

#[derive(Args)]
pub struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Number of encoder blocks.
    #[arg(long)]
    encoders: Option<usize>,
    /// Redraw augmentation every epoch from the source phantoms.
    #[arg(long)]
    online_augmentation: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom {
        /// Override the recipe's image count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Sample volume sequences from a phantom dataset.
    Build {
        /// Phantom dataset directory or manifest.
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        sampling: SamplingFlags,
    },
    /// Cross-validated training on a sequence dataset.
    Train {
        /// Sequence dataset directory or manifest.
        #[arg(long)]
        sequences: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Score each fold's checkpoint on its test centerlines.
    Evaluate {
        /// Training run directory or its manifest.
        #[arg(long)]
        run: PathBuf,
        /// Sequence dataset; defaults to the one the run used.
        #[arg(long)]
        sequences: Option<PathBuf>,
        #[arg(long)]
        tolerance: Option<usize>,
    },
    /// Label every center of one phantom image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Phantom image file.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        tolerance: Option<usize>,
        /// Also write a PNG rendering.
        #[arg(long)]
        plot: bool,
    },
    /// Collect manifests, metrics and curves of a run into one document.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Also write a PNG of the training curves.
        #[arg(long)]
        plot: bool,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.common.verbose);
    match commands::run(cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
