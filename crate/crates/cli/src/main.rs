//! `cyclone`: synthesize data, train global ensembles and category experts,
//! evaluate and explain them.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cyclone_core::ErrorKind;

#[derive(Parser, Debug)]
#[command(name = "cyclone", version, about = "Tropical-cyclone intensity estimation from satellite imagery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for member and expert training.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Dataset directory with `labels.csv` and `images/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Labels file overriding `<data>/labels.csv`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Validation labels; default is a storm-disjoint split of the training labels.
    #[arg(long)]
    pub val_labels: Option<PathBuf>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Network preset: small (64 px) or reference (352 px).
    #[arg(long, value_parser = ["small", "reference"])]
    pub network: Option<String>,
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset (images plus labels CSV).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        noise: Option<f32>,
        #[arg(long)]
        speed_min: Option<f32>,
        #[arg(long)]
        speed_max: Option<f32>,
    },
    /// Storm-disjoint train/validation split of a labels file.
    Split {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Train the bootstrap ensemble.
    TrainGlobal {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Ensemble size.
        #[arg(long)]
        members: Option<usize>,
    },
    /// Train per-category experts behind a trained gate.
    TrainExperts {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Gate checkpoint (ensemble or single model).
        #[arg(long)]
        gate: PathBuf,
        #[arg(long, value_parser = ["none", "third"])]
        overlap: Option<String>,
    },
    /// Predict wind speeds for a dataset or individual images.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        /// Image files, predicted in addition to `--data`.
        images: Vec<PathBuf>,
    },
    /// Metric report for a checkpoint on a labelled dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, required_unless_present = "oracle")]
        model: Option<PathBuf>,
        /// Predict the labels themselves; checks the report plumbing.
        #[arg(long, hide = true)]
        oracle: bool,
    },
    /// Grad-CAM heatmaps, median mask and overlay for one image.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Conv stage, 1 (shallowest) to 5.
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=5))]
        layer: u8,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
