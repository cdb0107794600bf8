//! Flag definitions. Every training flag may also come from a `--config` TOML
//! file; flags given on the command line win.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use usnet::calibrate::Average;
use usnet::data::DataSpec;
use usnet::train::LossKind;
use usnet::width::{SamplingRule, WidthRange};

#[derive(Debug, Parser)]
#[command(
    name = "usnet",
    version,
    about = "Train, calibrate and analyze universally slimmable networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network for every width in the range.
    Train(TrainArgs),
    /// Compute batch-norm statistics for chosen widths of a trained checkpoint.
    Calibrate(CalibrateArgs),
    /// FLOPs (and optionally error) across a width range, as CSV.
    Sweep(SweepArgs),
    /// Multiply-adds of an architecture at one width.
    Flops(FlopsArgs),
    /// Compare the four width-sampling rules under one training config.
    Ablate(AblateArgs),
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    match s {
        "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
        "l1" => Ok(LossKind::L1),
        "l2" => Ok(LossKind::L2),
        _ => Err(format!("unknown loss `{s}`; expected cross_entropy, l1 or l2")),
    }
}

/// Options shared by `train` and `ablate`.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOpts {
    /// TOML file with any of the options below (snake_case keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Builtin architecture name or TOML file.
    #[arg(long)]
    pub arch: Option<String>,
    /// synth:KIND:N:SEED, csv:PATH or idx:IMAGES,LABELS.
    #[arg(long)]
    pub data: Option<DataSpec>,
    /// Held-out data for accuracy reports (default: a 20% split of --data).
    #[arg(long)]
    pub eval_data: Option<DataSpec>,
    /// lo:hi; lo is the smallest trained width ratio, hi must be 1.0.
    #[arg(long)]
    pub width_range: Option<WidthRange>,
    #[arg(long)]
    pub n_widths: Option<usize>,
    /// sandwich, n_random, min_plus_random or max_plus_random.
    #[arg(long)]
    pub rule: Option<SamplingRule>,
    #[arg(long)]
    pub distill: Option<bool>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub divisor: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines training log (default: the checkpoint path with `.log.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: DataSpec,
    /// lo:step:hi.
    #[arg(long, default_value = "0.25:0.25:1.0")]
    pub widths: WidthRange,
    /// Examples to draw (default: all).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value = "exact")]
    pub average: Average,
    /// Default: the batch size the checkpoint was trained with.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Default: the checkpoint's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the calibrated checkpoint (default: overwrite --ckpt).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Calibrated checkpoint; needed for accuracy.
    #[arg(long, conflicts_with = "arch")]
    pub ckpt: Option<PathBuf>,
    /// Architecture for a FLOPs-only sweep.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long, default_value = "0.25:0.025:1.0")]
    pub widths: WidthRange,
    /// Evaluate top-1 error on this data (checkpoint required).
    #[arg(long, requires = "ckpt")]
    pub data: Option<DataSpec>,
    #[arg(long, default_value_t = 8)]
    pub divisor: usize,
    #[arg(long, default_value_t = 0.25)]
    pub lower_bound: f64,
    /// Extra ratio applied to one stage at a time, giving one curve per stage.
    #[arg(long)]
    pub stage_extra: Option<f64>,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// CSV path (default: stdout). Stage sweeps write `<stem>.stage<N>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub arch: String,
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    #[arg(long, default_value_t = 8)]
    pub divisor: usize,
    #[arg(long, default_value_t = 0.25)]
    pub lower_bound: f64,
    /// Print every layer as well as the stage totals.
    #[arg(long)]
    pub per_layer: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub opts: TrainOpts,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
