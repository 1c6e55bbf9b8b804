use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use skelgraph::data::Motion;
use skelgraph::model::VisionMode;
use skelgraph::Precision;

#[derive(Debug, Parser)]
#[command(name = "skelgraph", version, about = "Forecast 3D skeleton motion from 2D observations")]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON configuration file, applied under explicit flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Generate synthetic skeleton sequences.
    Synth(SynthArgs),
    /// Train a model on a directory of sequences.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or a prediction file against ground truth.
    Eval(EvalArgs),
    /// Predict future poses for a sequence.
    Predict(PredictArgs),
    /// Render skeleton overlays and error curves as SVG.
    Plot(PlotArgs),
    /// Write the learned adjacency of one observation window as CSV.
    ExportAdjacency(ExportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of sequences.
    #[arg(long)]
    pub n: Option<usize>,
    /// Frames per sequence.
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub joints: Option<usize>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub motion: Option<Motion>,
    /// Standard deviation of the 2D observation noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Also render a procedural PNG per frame.
    #[arg(long)]
    pub images: bool,
    #[arg(long, default_value_t = 128)]
    pub image_size: u32,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub obs_len: Option<usize>,
    #[arg(long)]
    pub pred_len: Option<usize>,
    #[arg(long)]
    pub n_spgcnn: Option<usize>,
    #[arg(long)]
    pub n_txcnn: Option<usize>,
    #[arg(long)]
    pub vision: Option<VisionMode>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of sequence files (or a single file).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out sequences evaluated during training.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub precision: Option<Precision>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file.
    #[arg(long, conflicts_with = "pred", requires = "data")]
    pub ckpt: Option<PathBuf>,
    /// Directory of sequence files (or a single file).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Prediction document to score.
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    /// Ground-truth sequence for `--pred`.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Window stride (defaults to the prediction length).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Report file; the report is always printed to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, required_unless_present = "copy_gt")]
    pub ckpt: Option<PathBuf>,
    /// Sequence file to forecast.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Emit the ground-truth future instead of running a model.
    #[arg(long)]
    pub copy_gt: bool,
    /// Window stride (defaults to the prediction length).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Vision mode the checkpoint must have been trained with.
    #[arg(long)]
    pub vision: Option<VisionMode>,
    #[arg(long)]
    pub obs_len: Option<usize>,
    #[arg(long)]
    pub pred_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Ground-truth sequence.
    #[arg(long)]
    pub gt: PathBuf,
    /// Prediction document.
    #[arg(long)]
    pub pred: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Prediction window to draw.
    #[arg(long, default_value_t = 0)]
    pub window: usize,
    /// Future frame indices to draw (default: first, middle, last).
    #[arg(long, value_delimiter = ',')]
    pub frames: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Sequence file supplying the observation window.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// First observed frame.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
}
