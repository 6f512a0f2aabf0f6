use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "csau", version, about = "Connection-sensitive segmentation of thin curvilinear structures")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate connectivity rates by sampling and fit the power-law curve.
    FitConnectivity(FitConnectivityArgs),
    /// Generate a synthetic image/label dataset.
    Synth(SynthArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Tiled prediction on one image.
    Predict(PredictArgs),
    /// Score probability maps against labels.
    Evaluate(EvaluateArgs),
    /// Dump loss terms and maps for one prediction/label pair.
    LossInspect(LossInspectArgs),
    /// Train and score the four model/loss combinations.
    Ablation(AblationArgs),
    /// Re-run a command from its run manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
pub enum RuleArg {
    NonAdjacent,
    Any,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
pub enum AttentionArg {
    None,
    UpLink,
    DownLink,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
pub enum LossArg {
    Ce,
    Cs,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
pub enum ReductionArg {
    Mean,
    Sum,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
pub enum AccModeArg {
    Agreement,
    PredictedForeground,
}

/// Parameters of the connectivity curve used by the loss and the metrics.
#[derive(Args, Debug, Clone, Serialize)]
pub struct ModelArgs {
    /// Key=value file written by `fit-connectivity`; overrides the built-in curve.
    #[arg(long)]
    pub connectivity: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FitConnectivityArgs {
    #[command(flatten)]
    pub common: Common,
    /// Window side.
    #[arg(long, default_value_t = 5)]
    pub r: usize,
    /// Patches sampled per foreground count.
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, value_enum, default_value_t = RuleArg::NonAdjacent)]
    pub rule: RuleArg,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Index of the first sample; disjoint ranges give disjoint splits.
    #[arg(long, default_value_t = 0)]
    pub first: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct NetArgs {
    #[arg(long, default_value_t = 32)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, value_enum, default_value_t = AttentionArg::UpLink)]
    pub attention: AttentionArg,
    /// Drop the attention-weight concatenation before the output layer.
    #[arg(long)]
    pub no_concat_head: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct OptimArgs {
    #[arg(long, value_enum, default_value_t = LossArg::Cs)]
    pub loss: LossArg,
    /// Max-pool window of the risk weight.
    #[arg(long, default_value_t = 7)]
    pub lambda: usize,
    #[arg(long, default_value_t = 0.002)]
    pub lr0: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_floor: f64,
    #[arg(long, default_value_t = 0.1)]
    pub decay_factor: f64,
    #[arg(long, default_value_t = 5)]
    pub decay_patience: u32,
    #[arg(long, default_value_t = 20)]
    pub reset_patience: u32,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 25)]
    pub max_epochs: usize,
    /// Batches between validations.
    #[arg(long, default_value_t = 50)]
    pub validate_every: usize,
    /// One random rotation/flip variant per sample per epoch.
    #[arg(long)]
    pub augment: bool,
    /// Record elapsed seconds in the history (makes it non-reproducible).
    #[arg(long)]
    pub record_wall_time: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory with a manifest.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Continue from a trainer checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop (with a resumable checkpoint) after this many optimizer steps in total.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 640)]
    pub tile: usize,
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
    /// Mirrored margin added around each window and cropped after prediction.
    #[arg(long, default_value_t = 0)]
    pub context: usize,
    /// Also write each gate's attention map.
    #[arg(long)]
    pub visualize: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Probability map(s); paired in order with --label.
    #[arg(long, required = true, num_args = 1..)]
    pub pred: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    pub label: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Threshold on `1 - C^2` for thin foreground in the accuracy mask.
    #[arg(long, default_value_t = 0.5)]
    pub thin_threshold: f64,
    #[arg(long, default_value_t = 1.0)]
    pub dog_sigma1: f64,
    #[arg(long, default_value_t = 1.6)]
    pub dog_sigma2: f64,
    #[arg(long, default_value_t = 0.01)]
    pub dog_tau: f64,
    #[arg(long, value_enum, default_value_t = AccModeArg::Agreement)]
    pub acc_mode: AccModeArg,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write PR and ROC curve CSVs.
    #[arg(long)]
    pub emit_curves: bool,
    /// Write the accuracy mask as PNG.
    #[arg(long)]
    pub emit_mask: bool,
    /// Write connectivity feature maps and false-negative overlays.
    #[arg(long)]
    pub visualize: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct LossInspectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub label: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub lambda: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub eps: f64,
    #[arg(long, value_enum, default_value_t = ReductionArg::Mean)]
    pub reduction: ReductionArg,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct AblationArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directories; when omitted, synthetic splits are generated.
    #[arg(long, requires_all = ["val", "test"])]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub train_count: usize,
    #[arg(long, default_value_t = 20)]
    pub val_count: usize,
    #[arg(long, default_value_t = 50)]
    pub test_count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Training seeds; each runs all four variants.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub common: Common,
    /// `run.json` of the run to reproduce.
    #[arg(long)]
    pub manifest: PathBuf,
}
