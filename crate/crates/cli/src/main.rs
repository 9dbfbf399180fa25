//! `sarcloud`: synthesize cloudy datasets, train both stages, evaluate,
//! ablate, and run inference.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sarcloud::error::ErrorClass;

#[derive(Debug, Parser)]
#[command(name = "sarcloud", version, about = "Two-stage SAR-guided cloud removal")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=400`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Sar2opt,
    Cloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReferenceKind {
    /// Returns the ground truth.
    Oracle,
    /// Returns the cloudy input unchanged.
    Cloudy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add synthetic clouds to the clean pairs in `data.source`, writing the
    /// dataset to `data.root`.
    Synth,
    /// Train one stage on `data.train_split`.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Discard existing checkpoints in the output directory.
        #[arg(long, conflicts_with = "resume")]
        overwrite: bool,
        /// Stage-1 checkpoint for cloud removal (sets `train.sar2opt_checkpoint`).
        #[arg(long)]
        sar2opt_ckpt: Option<PathBuf>,
        /// Train cloud removal on raw SAR without stage 1 (sets
        /// `train.use_sar2opt_stage = false`).
        #[arg(long)]
        no_sar2opt: bool,
        /// Output directory [default: `<output.dir>/train-<stage>`].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on `data.eval_split`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Also write a comparison grid with one row per image.
        #[arg(long)]
        grid: bool,
        /// Output directory [default: `<output.dir>/eval`].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of the `ablate` matrix.
    Ablate {
        /// Output directory [default: `<output.dir>/ablate`].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one image through a checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// Single-channel SAR PNG.
        #[arg(long)]
        sar: PathBuf,
        /// RGB cloudy PNG (cloud-removal checkpoints).
        #[arg(long)]
        cloudy: Option<PathBuf>,
        /// Output PNG.
        #[arg(long)]
        output: PathBuf,
    },
    /// Side-by-side comparison of several checkpoints on `data.eval_split`.
    Grid {
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        /// Maximum number of rows.
        #[arg(long, default_value_t = 4)]
        limit: usize,
        /// Output PNG [default: `<output.dir>/grid.png`].
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a procedural dataset of clean SAR/optical pairs.
    Fixture {
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a tensor-free reference checkpoint.
    Reference {
        #[arg(long, value_enum)]
        kind: ReferenceKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
