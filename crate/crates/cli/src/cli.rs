use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use subface::data::DataFormat;
use subface::eval::DistanceMetric;
use subface::{MarginPreset, MaskMode};

/// Random-subspace margin softmax: data generation, training, evaluation and
/// ratio sweeps on synthetic identities.
///
/// Every option can also be set in a flat TOML file passed with `--config`,
/// using the flag name as key (`batch-size = 128`). Flags win over the file.
#[derive(Debug, Parser)]
#[command(name = "subface", version)]
pub struct Cli {
    /// Flat TOML file of `flag-name = value` defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic identity-cluster dataset.
    Generate(GenerateArgs),
    /// Train an embedding network and write metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labeled data with the pair protocol.
    Eval(EvalArgs),
    /// Train and evaluate one model per (ratio, seed) on synthetic data.
    SweepRatio(SweepArgs),
    /// Minimum subfeature cosine of positive pairs under random subsets.
    Compactness(CompactnessArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataFlags {
    /// Number of identities [default: 50].
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Samples per identity [default: 200].
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    /// Input dimension [default: 32].
    #[arg(long)]
    pub input_dim: Option<usize>,
    /// Gaussian noise around each class center [default: 0.15].
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub data: DataFlags,
    /// Seed for centers and noise [default: 2024].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write held-out samples of the same identities instead, with noise
    /// keyed by this seed.
    #[arg(long)]
    pub holdout_seed: Option<u64>,
    /// Output encoding: raw-f64 or csv.
    #[arg(long, default_value_t = DataFormat::RawF64)]
    pub format: DataFormat,
    /// Output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct NetFlags {
    /// Hidden layer widths, comma separated; empty for a single linear map.
    #[arg(long)]
    pub hidden: Option<String>,
    /// Embedding dimension d.
    #[arg(long)]
    pub embedding_dim: Option<usize>,
}

/// Optimizer, schedule, sampler and margin settings. Unset values fall back
/// to the command's base configuration.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// Fraction of embedding dimensions kept per batch, in (0, 1].
    #[arg(long)]
    pub ratio: Option<f64>,
    /// fixed-count (exactly floor(r*d) dims) or bernoulli.
    #[arg(long)]
    pub mask_mode: Option<MaskMode>,
    /// Train the plain margin head with no sampler.
    #[arg(long)]
    pub baseline: bool,
    /// softmax, arcface, cosface or combined.
    #[arg(long)]
    pub margin_preset: Option<MarginPreset>,
    /// Logit scale, overriding the preset.
    #[arg(long)]
    pub s: Option<f64>,
    /// Multiplicative angular margin, overriding the preset.
    #[arg(long)]
    pub m1: Option<f64>,
    /// Additive angular margin in radians, overriding the preset.
    #[arg(long)]
    pub m2: Option<f64>,
    /// Additive cosine margin, overriding the preset.
    #[arg(long)]
    pub m3: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Total training iterations.
    #[arg(long)]
    pub iters: Option<u64>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Iterations at which the learning rate decays, comma separated.
    #[arg(long)]
    pub milestones: Option<String>,
    /// Multiplier applied at each milestone.
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Iterations between metric records.
    #[arg(long)]
    pub log_interval: Option<u64>,
    /// Run every kernel on the calling thread. Results are unchanged.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training dataset file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DataFormat::RawF64)]
    pub format: DataFormat,
    #[command(flatten)]
    pub net: NetFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Seed for batch order and masks [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed for network initialization [default: --seed].
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Also write a checkpoint every this many iterations.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint written with the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory for metrics.jsonl and checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved network and training configuration as JSON and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PairFlags {
    /// Positive pairs to draw.
    #[arg(long, default_value_t = 500)]
    pub num_pos: usize,
    /// Negative pairs to draw.
    #[arg(long, default_value_t = 500)]
    pub num_neg: usize,
    #[arg(long, default_value_t = 7)]
    pub pair_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Labeled evaluation dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DataFormat::RawF64)]
    pub format: DataFormat,
    #[command(flatten)]
    pub pairs: PairFlags,
    /// False-accept rates for TAR@FAR, comma separated.
    #[arg(long, default_value = "0.1,0.01")]
    pub fars: String,
    /// Also report 10-fold accuracy.
    #[arg(long)]
    pub ten_fold: bool,
    /// Histogram metric: euclidean or cosine.
    #[arg(long, default_value_t = DistanceMetric::Euclidean)]
    pub metric: DistanceMetric,
    #[command(flatten)]
    pub compactness: CompactnessFlags,
    /// Output directory for report.jsonl, histogram.csv and compactness.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompactnessFlags {
    /// Subfeature dimension [default: a quarter of d].
    #[arg(long)]
    pub sub_dim: Option<usize>,
    /// Random subsets per pair.
    #[arg(long, default_value_t = 10)]
    pub num_draws: usize,
    #[arg(long, default_value_t = 0)]
    pub compactness_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct CompactnessArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = DataFormat::RawF64)]
    pub format: DataFormat,
    #[command(flatten)]
    pub pairs: PairFlags,
    #[command(flatten)]
    pub compactness: CompactnessFlags,
    /// Output csv file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataFlags,
    /// Seed for the synthetic dataset [default: 2024].
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Held-out samples per identity, used for pairs.
    #[arg(long, default_value_t = 20)]
    pub holdout_per_class: usize,
    #[command(flatten)]
    pub pairs: PairFlags,
    #[command(flatten)]
    pub net: NetFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Sampling ratios, comma separated.
    #[arg(long, default_value = "0.1,0.4,0.7,1.0")]
    pub ratios: String,
    /// Run seeds per ratio, comma separated.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    /// Output csv file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
