//! `lseg` command-line driver.

mod commands;
mod overlay;

pub use commands::phantom_pipeline_config;
pub use overlay::{contour, render_overlay};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::dataset::Split;
use crate::parallel::Exec;

/// Exit code for data or partial failures.
pub const EXIT_DATA: u8 = 1;
/// Exit code for invalid configuration or usage.
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "lseg", version, about = "Weakly-supervised lesion co-segmentation from RECIST marks")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic lesion dataset with analytic ground truth.
    Phantom(PhantomArgs),
    /// Produce GrabCut pseudo-masks for every lesion record.
    GenMasks(GenMasksArgs),
    /// Train the co-segmentation network on pseudo-mask pairs.
    Train(TrainArgs),
    /// Predict lesion masks for a split.
    Infer(InferArgs),
    /// Refine one probability map with the dense CRF.
    Refine(RefineArgs),
    /// Score predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Draw prediction and ground-truth contours over an image.
    Overlay(OverlayArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Output directory; receives images/, gt/, lesions.csv and pipeline.toml.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub lesions_per_patient: usize,
    /// Gaussian noise standard deviation in HU.
    #[arg(long, default_value_t = 10.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `paths.dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Overrides `paths.work_dir`.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenMasksArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Continue from the checkpoint in the work directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iters_per_epoch: Option<usize>,
    #[arg(long)]
    pub pairs_per_batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Defaults to `<work_dir>/model.csgw`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// CSV of `a,b` lesion id pairs; outputs are then written per pair.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Refine probabilities with the dense CRF before thresholding.
    #[arg(long)]
    pub crf: bool,
    /// Defaults to `<work_dir>/predictions`; receives masks/ and probs/.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Optional pipeline configuration for CRF and windowing parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CT image in HU (16-bit PNG or LSEG1).
    #[arg(long)]
    pub image: PathBuf,
    /// Lesion probability map (LSEG1) at the preprocessed size.
    #[arg(long)]
    pub prob: PathBuf,
    /// Output binary mask PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the refined probabilities (LSEG1).
    #[arg(long)]
    pub prob_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Receives report.csv, summary.json and table.txt.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// HU window as `low,high`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [-175.0, 275.0])]
    pub window: Vec<f64>,
}

/// A command finished but some inputs failed.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct PartialFailure(pub String);

impl Cli {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let exec = cli.exec();
    match cli.command {
        Command::Phantom(a) => commands::phantom(&a),
        Command::GenMasks(a) => commands::gen_masks(&a, exec),
        Command::Train(a) => commands::train(&a, exec),
        Command::Infer(a) => commands::infer(&a, exec),
        Command::Refine(a) => commands::refine(&a, exec),
        Command::Evaluate(a) => commands::evaluate(&a, exec),
        Command::Overlay(a) => commands::overlay(&a),
    }
}

/// Parses and runs; argument errors are reported as configuration errors.
pub fn run_args<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| crate::Error::Config(e.to_string()))?;
    run(cli)
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<crate::Error>() {
        Some(e) if e.is_config() => EXIT_CONFIG,
        _ => EXIT_DATA,
    }
}
