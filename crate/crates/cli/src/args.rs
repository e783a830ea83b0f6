use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "volseg", version, about = "Liver segmentation pipeline for CT volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the pipeline stages. Flags override the config file,
/// which overrides built-in defaults.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML pipeline configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Input directory (overrides `paths.input_dir`).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory (overrides `paths.output_dir`).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Resample, window, normalize, greymap and diffuse HU volumes.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Volumes to process; defaults to every non-mask `.mhd` in the input directory.
        volumes: Vec<PathBuf>,
    },
    /// Train on the training split of a preprocessed directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Seed for the split and patch sampling.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Label preprocessed volumes with a trained network.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Model descriptor written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Refine with the dense CRF.
        #[arg(long)]
        crf: bool,
        /// Restrict to the test ids of a split plan.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Volume ids; defaults to every preprocessed volume in the input directory.
        ids: Vec<String>,
    },
    /// Score predictions against reference masks.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory holding `<id>_full_mask.mhd` references.
        #[arg(long)]
        truth: PathBuf,
        /// Dataset name for the summary table.
        #[arg(long, default_value = "phantom")]
        dataset: String,
    },
    /// Render one axial slice with the mask outline as PNG.
    Overlay {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        slice: usize,
        /// PNG file to write.
        #[arg(long)]
        output: PathBuf,
    },
    /// Write synthetic phantoms with reference masks.
    Phantom {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, num_args = 3, value_names = ["X", "Y", "Z"], default_values_t = [64, 64, 64])]
        dims: Vec<usize>,
    },
    /// Re-run a recorded command and check its outputs hash the same.
    Replay {
        manifest: PathBuf,
        /// Run index; defaults to the last run.
        #[arg(long)]
        run: Option<usize>,
    },
}
