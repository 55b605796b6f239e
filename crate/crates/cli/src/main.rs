//! `merba` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Desk-scale experiments with the MERba micro-expression backbone.
#[derive(Debug, Parser)]
#[command(name = "merba", version, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Three classes in disjoint facial regions
    ThreeClass,
    /// Seven classes; the four negatives share a region and differ by direction
    Confusable,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Preset name (default, miniature) or path to a flat JSON config
    #[arg(long, default_value = "default")]
    pub config: String,
    /// Seed for every random choice of the run
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parent directory of the run directory
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Floating-point precision for weights and activations
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    pub dtype: Dtype,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print a window scan order
    Scan {
        /// Scan direction: a, b, c or d with optional _bi / _sy suffixes
        #[arg(long)]
        direction: String,
        /// Window height
        #[arg(long)]
        height: usize,
        /// Window width
        #[arg(long)]
        width: usize,
        /// Print the step number of every cell laid out on the grid
        #[arg(long)]
        grid: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Print total and per-module trainable parameter counts
    Paramcount {
        #[command(flatten)]
        common: Common,
    },
    /// Print the stage-by-stage shape trace
    Shapes {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic optical-flow dataset
    Synth {
        /// Class layout of the generated data
        #[arg(long, value_enum, default_value_t = Preset::ThreeClass)]
        preset: Preset,
        /// Samples per class
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        /// Flow field side length in pixels [default: model input size]
        #[arg(long)]
        size: Option<usize>,
        /// Standard deviation of additive Gaussian noise
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Direction gap in degrees between the confusable negatives
        #[arg(long, default_value_t = 10.0)]
        angle_gap: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset directory and save a checkpoint
    Train {
        /// Dataset directory written by `synth` or in the same layout
        #[arg(long)]
        data: PathBuf,
        /// Override the number of epochs
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a dataset, or score a predictions file
    Eval {
        /// Checkpoint directory written by `train`
        #[arg(long, required_unless_present = "predictions", requires = "data")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory to evaluate on
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV with header `truth,pred` and one label name pair per row
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a Grad-CAM saliency map for one sample
    Saliency {
        /// Checkpoint directory [default: freshly initialised weights]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory holding the sample
        #[arg(long)]
        data: PathBuf,
        /// Position of the sample in the dataset index
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Class to explain [default: the sample's label]
        #[arg(long)]
        target: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the f64 finite-difference gradient suite
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Validation failures exit with 1, numerical failures with 2.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Numerical(String),
}

impl From<merba::Error> for Failure {
    fn from(e: merba::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("MERBA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Invalid(format!("MERBA_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Invalid(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Scan {
            direction,
            height,
            width,
            grid,
            common,
        } => commands::scan(&common, &direction, height, width, grid),
        Command::Paramcount { common } => commands::paramcount(&common),
        Command::Shapes { common } => commands::shapes(&common),
        Command::Synth {
            preset,
            per_class,
            size,
            noise,
            angle_gap,
            common,
        } => commands::synth(&common, preset, per_class, size, noise, angle_gap),
        Command::Train { data, epochs, common } => commands::train(&common, &data, epochs),
        Command::Eval {
            checkpoint,
            data,
            predictions,
            common,
        } => commands::eval(&common, checkpoint.as_deref(), data.as_deref(), predictions.as_deref()),
        Command::Saliency {
            checkpoint,
            data,
            index,
            target,
            common,
        } => commands::saliency(&common, checkpoint.as_deref(), &data, index, target.as_deref()),
        Command::Gradcheck { common } => commands::gradcheck(&common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}
