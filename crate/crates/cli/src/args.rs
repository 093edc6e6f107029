use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "kinesig",
    version,
    about = "Person identification from whole-body keypoint sequences",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic identity dataset as JSONL.
    Synth(SynthArgs),
    /// Train a model and write metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of a model's gradients.
    Gradcheck(GradcheckArgs),
    /// Parameters, FLOPs and measured throughput of a model.
    Bench(BenchArgs),
    /// Render accuracy, velocity and efficiency tables from earlier runs.
    Report(ReportArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Str,
    Ttr,
    Msttr,
    Dual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TemporalArg {
    Ttr,
    Msttr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PostureOnly,
    RhythmOnly,
    Mixed,
    Micro,
    Stillness,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON file with a full synthetic config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ModelFlags {
    #[arg(long, value_enum, default_value = "dual")]
    pub model: ModelArg,
    /// Stride of a single-scale temporal transformer.
    #[arg(long, default_value_t = 9)]
    pub k: usize,
    /// Feed frame differences to the temporal stream.
    #[arg(long)]
    pub velocity: bool,
    #[arg(long, value_enum, default_value = "on")]
    pub positional: Switch,
    #[arg(long = "joint-embedding", value_enum, default_value = "on")]
    pub joint_embedding: Switch,
    /// Temporal stream of the dual model.
    #[arg(long, value_enum, default_value = "msttr")]
    pub temporal: TemporalArg,
    #[arg(long = "d-model", default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Feed-forward width (default twice the model width).
    #[arg(long = "d-ff")]
    pub d_ff: Option<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    /// Add a pooled-input residual to the multi-scale head.
    #[arg(long)]
    pub residual: bool,
    /// One encoder shared by both multi-scale branches.
    #[arg(long = "share-backbone")]
    pub share_backbone: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DataFlags {
    #[arg(long)]
    pub data: PathBuf,
    /// Model input length after resampling.
    #[arg(long = "input-frames", default_value_t = 30)]
    pub input_frames: usize,
    /// Frame stride applied before cropping or padding.
    #[arg(long = "frame-stride", default_value_t = 2)]
    pub frame_stride: usize,
    /// Skip centring and scale normalization.
    #[arg(long = "no-normalize")]
    pub no_normalize: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long, default_value_t = 120)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long = "batch-size", default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Spatial, temporal and fusion loss weights.
    #[arg(long = "loss-weights", value_delimiter = ',', default_values_t = [1.0, 1.0, 1.0])]
    pub loss_weights: Vec<f64>,
    #[arg(long = "train-fraction", default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Stop after this many epochs without improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Multiply the learning rate by GAMMA every N epochs, given as N,GAMMA.
    #[arg(long = "lr-step", value_delimiter = ',')]
    pub lr_step: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "dual")]
    pub model: ModelArg,
    /// d_model 8 and one head; required unless --d-model is given.
    #[arg(long)]
    pub tiny: bool,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long = "d-model")]
    pub d_model: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub frames: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Benchmark a trained checkpoint instead of a fresh model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Total measurement time in seconds.
    #[arg(long, default_value_t = 5.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    #[arg(long = "batch-size", default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Training output directories.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Bench output directories.
    #[arg(long, num_args = 1..)]
    pub bench: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
