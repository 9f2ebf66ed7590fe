//! Command-line surface.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use gitseg::losses::LossTag;
use gitseg::unet::BlockStyle;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "gitseg", version, about = "Organ segmentation on abdominal MR slices with a from-scratch U-Net")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a small synthetic dataset in the on-disk layout.
    Fixture(FixtureArgs),
    /// Train a model; artifacts go to a fresh run directory.
    Train(TrainArgs),
    /// Predict masks for every slice under a data directory.
    Predict(PredictArgs),
    /// Score a prediction CSV against a truth CSV.
    Eval(EvalArgs),
    /// Run-length encode or decode a mask.
    #[command(subcommand)]
    Rle(RleCommand),
    /// Merge history CSVs into long format for plotting.
    Curves(CurvesArgs),
    /// Train every (block style, loss) combination and tabulate validation IoU.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    /// Output directory; must be absent or empty.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub cases: usize,
    #[arg(long, default_value_t = 1)]
    pub days: usize,
    #[arg(long, default_value_t = 2)]
    pub slices_per_day: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn d() -> RunConfig {
    RunConfig::default()
}

/// Every flag overrides the same-named key of the `--config` JSON file.
#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    /// JSON file with any subset of the flags below (snake_case keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root (case*/case*_day*/scans/...).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Annotation CSV [default: <data>/train.csv]
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Parent directory for run directories.
    #[arg(long, default_value_os_t = d().out)]
    pub out: PathBuf,
    #[arg(long, default_value_t = d().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = d().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = d().lr_init)]
    pub lr_init: f64,
    #[arg(long, default_value_t = d().lr_min)]
    pub lr_min: f64,
    /// Fraction of cases used for training.
    #[arg(long, default_value_t = d().split_fraction)]
    pub split_fraction: f64,
    /// iou_loss, bce_tversky or iou_tversky.
    #[arg(long, default_value_t = d().loss)]
    pub loss: LossTag,
    #[arg(long, default_value_t = d().tversky_alpha)]
    pub tversky_alpha: f64,
    #[arg(long, default_value_t = d().tversky_beta)]
    pub tversky_beta: f64,
    #[arg(long, default_value_t = d().smooth_eps)]
    pub smooth_eps: f64,
    #[arg(long, default_value_t = d().augment_flips, action = ArgAction::Set)]
    pub augment_flips: bool,
    #[arg(long, default_value_t = d().seed)]
    pub seed: u64,
    /// Model input edge in pixels.
    #[arg(long, default_value_t = d().image_size)]
    pub image_size: usize,
    #[arg(long, default_value_t = d().depth)]
    pub depth: usize,
    #[arg(long, default_value_t = d().base_channels)]
    pub base_channels: usize,
    /// plain, residual or inverted_residual.
    #[arg(long, default_value_t = d().block_style)]
    pub block_style: BlockStyle,
    /// Skip the case split: train and validate on every slice.
    #[arg(long, default_value_t = d().train_on_all, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub train_on_all: bool,
    /// Also score the training split after every epoch.
    #[arg(long, default_value_t = d().track_train_iou, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub track_train_iou: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Dataset root to predict on.
    #[arg(long)]
    pub data: PathBuf,
    /// Output submission CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Patch edge; must match the size the model was trained at.
    #[arg(long, default_value_t = gitseg::preprocess::PATCH_SIZE)]
    pub image_size: usize,
    /// Trim/pad each slice to one patch instead of tiling oversized slices.
    #[arg(long)]
    pub whole_image: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Dataset root supplying each slice's dimensions.
    #[arg(long, conflicts_with_all = ["height", "width"])]
    pub data: Option<PathBuf>,
    /// Uniform slice height when no --data is given.
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
    /// Also write the report as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum RleCommand {
    /// Bitmap text (row-major 0/1, whitespace ignored) to RLE.
    Encode(RleArgs),
    /// RLE to row-major bitmap text.
    Decode(RleDecodeArgs),
}

#[derive(Debug, Args)]
pub struct RleArgs {
    /// Input text; read from stdin when absent.
    pub input: Option<String>,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
}

#[derive(Debug, Args)]
pub struct RleDecodeArgs {
    #[command(flatten)]
    pub common: RleArgs,
    /// Print one line per image row.
    #[arg(long)]
    pub rows: bool,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    /// history.csv files; each run is named after its parent directory.
    #[arg(required = true)]
    pub histories: Vec<PathBuf>,
    /// Output CSV [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_delimiter = ',', default_value = "plain,residual,inverted_residual")]
    pub styles: Vec<BlockStyle>,
    #[arg(long, value_delimiter = ',', default_value = "iou_loss,bce_tversky,iou_tversky")]
    pub losses: Vec<LossTag>,
}
