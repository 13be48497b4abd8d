//! Command-line front end: dataset building, training, evaluation, prompt
//! inspection and run comparison. Every command writes plain files (CSV,
//! JSON, PNG, safetensors) into a run or output directory.

mod compare;
mod dataset;
mod inspect;
mod run;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use fopro_core::data::Split;

pub use compare::{compare_runs, ComparisonRow};

/// Default output root when neither `--out` nor the environment sets one.
pub const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(
    name = "fopro",
    version,
    about = "Long-tailed classification with Fourier-prompted distillation"
)]
pub struct Cli {
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,

    /// Root for default output directories.
    #[arg(long, global = true, env = "FOPRO_OUT_ROOT", default_value = DEFAULT_OUT_ROOT)]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Resolve the train/val/test split and write the manifest and a
    /// per-class count table.
    BuildDataset {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: `<out-root>/<name>-dataset`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a run, then plot its curves and report the best checkpoint on
    /// the test split.
    Train {
        /// Experiment config; optional with `--resume` and `--out`.
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: `<out-root>/<name>-<method>-seed<seed>`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in total, leaving a resumable run.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a run's checkpoint on one split.
    Evaluate {
        run_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Use the last checkpoint instead of the best one.
        #[arg(long)]
        last: bool,
    },
    /// Export prompt spectra and prompted images of a trained generator.
    InspectPrompts {
        run_dir: PathBuf,
        /// Number of sampled test images, one noise vector each.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
    /// Tabulate metrics across runs, mean and sample std per experiment.
    Compare {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// CSV destination (default: `<out-root>/comparison-<split>.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.device != "cpu" {
        bail!(
            "device {:?} is not available; only \"cpu\" is supported",
            cli.device
        );
    }
    match cli.command {
        Command::BuildDataset { config, out } => {
            dataset::build_dataset(&config, out, &cli.out_root)
        }
        Command::Train {
            config,
            seed,
            out,
            resume,
            stop_after,
        } => run::train(
            config.as_deref(),
            seed,
            out,
            resume,
            stop_after,
            &cli.out_root,
        ),
        Command::Evaluate {
            run_dir,
            split,
            last,
        } => run::evaluate(&run_dir, split, !last).map(|_| ()),
        Command::InspectPrompts { run_dir, samples } => inspect::inspect_prompts(&run_dir, samples),
        Command::Compare {
            run_dirs,
            split,
            out,
        } => {
            let out = out.unwrap_or_else(|| cli.out_root.join(format!("comparison-{split}.csv")));
            compare::compare(&run_dirs, split, &out)
        }
    }
}
