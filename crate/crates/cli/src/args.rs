use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use grafit_core::analysis::ProbeConfig;
use grafit_core::data::{AugmentationConfig, SynthConfig};
use grafit_core::losses::LossConfig;
use grafit_core::retrieval::{RankingMode, DEFAULT_EPSILON};
use grafit_core::trainer::{TrainConfig, TrainMode};
use grafit_core::{KnnConfig, LabelLevel};

#[derive(Debug, Parser)]
#[command(name = "grafit", version, about = "Fine-grained embedding training, retrieval and analysis on hierarchical data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic hierarchical dataset or import one from CSV.
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train a model; writes a checkpoint, the rebuilt embedding store and the log.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// kNN top-1 accuracy of test queries against a memory.
    #[command(args_override_self = true)]
    EvalKnn(EvalKnnArgs),
    /// Fine-label retrieval mAP of test queries against a memory.
    #[command(args_override_self = true)]
    EvalMap(EvalMapArgs),
    /// Write ranked memory entries for each query.
    #[command(args_override_self = true)]
    Retrieve(RetrieveArgs),
    /// Eigenvalues and cumulative energy of embedding PCA.
    #[command(args_override_self = true)]
    AnalyzePca(AnalyzePcaArgs),
    /// Linear-probe accuracy on random sub-splits of each coarse class.
    #[command(args_override_self = true)]
    Separability(SeparabilityArgs),
    /// Train and evaluate once per instance-loss weight.
    #[command(args_override_self = true)]
    SweepLambda(SweepLambdaArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::EvalKnn(_) => "eval-knn",
            Command::EvalMap(_) => "eval-map",
            Command::Retrieve(_) => "retrieve",
            Command::AnalyzePca(_) => "analyze-pca",
            Command::Separability(_) => "separability",
            Command::SweepLambda(_) => "sweep-lambda",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenData(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::EvalKnn(a) => &a.common,
            Command::EvalMap(a) => &a.common,
            Command::Retrieve(a) => &a.common,
            Command::AnalyzePca(a) => &a.common,
            Command::Separability(a) => &a.common,
            Command::SweepLambda(a) => &a.common,
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run directory for outputs and the manifest.
    #[arg(long, env = "GRAFIT_RUN_DIR", default_value = "grafit-run")]
    pub out: PathBuf,
    /// key=value file of option defaults; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; every random stream derives from it.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Worker threads for query evaluation.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Import features and labels from CSV (header d0..dD-1,coarse,fine) instead of sampling.
    #[arg(long)]
    pub from_csv: Option<PathBuf>,
    #[arg(long, default_value_t = SynthConfig::default().num_coarse)]
    pub num_coarse: usize,
    #[arg(long, default_value_t = SynthConfig::default().fine_per_coarse)]
    pub fine_per_coarse: usize,
    #[arg(long, default_value_t = SynthConfig::default().dim)]
    pub dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().coarse_separation)]
    pub coarse_separation: f64,
    #[arg(long, default_value_t = SynthConfig::default().fine_separation)]
    pub fine_separation: f64,
    #[arg(long, default_value_t = SynthConfig::default().samples_per_fine)]
    pub samples_per_fine: usize,
}

impl GenDataArgs {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_coarse: self.num_coarse,
            fine_per_coarse: self.fine_per_coarse,
            dim: self.dim,
            coarse_separation: self.coarse_separation,
            fine_separation: self.fine_separation,
            samples_per_fine: self.samples_per_fine,
            seed: self.common.seed,
        }
    }
}

/// Optimization and loss settings shared by `train` and `sweep-lambda`.
#[derive(Debug, Args)]
pub struct TrainingOptions {
    /// GDAT dataset to train on.
    #[arg(long)]
    pub dataset: PathBuf,
    /// One of grafit, grafit-fc, snca-plus, ce, ce-triplet, inst-only.
    #[arg(long, default_value = "grafit")]
    pub mode: TrainMode,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    /// Base learning rate; defaults to 0.1 / 256 * batch size.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    pub momentum: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
    /// Temperature of the kNN loss.
    #[arg(long, default_value_t = LossConfig::default().sigma)]
    pub sigma: f64,
    #[arg(long, default_value_t = LossConfig::default().num_augmentations)]
    pub num_augmentations: usize,
    #[arg(long, default_value_t = LossConfig::default().triplet_margin)]
    pub triplet_margin: f64,
    #[arg(long, default_value_t = AugmentationConfig::default().jitter_sigma)]
    pub jitter_sigma: f64,
    #[arg(long, default_value_t = AugmentationConfig::default().scale_range.0)]
    pub scale_min: f64,
    #[arg(long, default_value_t = AugmentationConfig::default().scale_range.1)]
    pub scale_max: f64,
    #[arg(long, default_value_t = AugmentationConfig::default().mask_prob)]
    pub mask_prob: f64,
    /// Labels supervising training: coarse or fine.
    #[arg(long, default_value = "coarse")]
    pub label_level: LabelLevel,
}

impl TrainingOptions {
    pub fn train_config(&self, seed: u64, lambda: f64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            loss: LossConfig { sigma: self.sigma, lambda, num_augmentations: self.num_augmentations, triplet_margin: self.triplet_margin },
            augmentation: AugmentationConfig {
                jitter_sigma: self.jitter_sigma,
                scale_range: (self.scale_min, self.scale_max),
                mask_prob: self.mask_prob,
                stream: 0,
            },
            label_level: self.label_level,
            seed,
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub training: TrainingOptions,
    /// Weight of the instance loss.
    #[arg(long, default_value_t = LossConfig::default().lambda)]
    pub lambda: f64,
    /// Write a checkpoint every this many epochs; 0 disables snapshots.
    #[arg(long, default_value_t = 0)]
    pub snapshot_every: usize,
}

/// kNN classifier settings.
#[derive(Debug, Args)]
pub struct KnnOptions {
    /// Neighbour count; chosen by leave-one-out over --k-grid when absent.
    #[arg(long)]
    pub k: Option<usize>,
    /// Temperature of the kNN vote weights.
    #[arg(id = "knn_sigma", long = "knn-sigma", default_value_t = KnnConfig::default().sigma)]
    pub sigma: f64,
    #[arg(long, value_delimiter = ',', default_value = "10,15,20,25,30")]
    pub k_grid: Vec<usize>,
}

/// Where queries and memory come from. Queries are either the dataset's
/// test split embedded by the checkpoint or the rows of a query store; the
/// memory is a stored embedding file or the training split re-embedded.
#[derive(Debug, Args)]
pub struct SourceOptions {
    /// GFIT checkpoint used to embed dataset features.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// GDAT dataset; its test split provides queries, its training split the memory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// GEMB memory store (defaults to the re-embedded training split).
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// GEMB store of query embeddings (replaces the dataset test split).
    #[arg(long)]
    pub query_store: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalKnnArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: SourceOptions,
    #[command(flatten)]
    pub knn: KnnOptions,
    /// Label levels to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "coarse,fine")]
    pub level: Vec<LabelLevel>,
}

#[derive(Debug, Args)]
pub struct EvalMapArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: SourceOptions,
    #[command(flatten)]
    pub knn: KnnOptions,
    /// Ranking modes to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "cosine,conditional,oracle")]
    pub mode: Vec<RankingMode>,
    /// Clamp of the coarse posterior in conditional ranking.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: SourceOptions,
    #[command(flatten)]
    pub knn: KnnOptions,
    /// cosine, conditional or oracle.
    #[arg(long, default_value = "cosine")]
    pub mode: RankingMode,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Entries kept per query; 0 keeps the full ranking.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzePcaArgs {
    #[command(flatten)]
    pub common: Common,
    /// GEMB store whose rows are analyzed.
    #[arg(long, conflicts_with_all = ["checkpoint", "dataset"])]
    pub store: Option<PathBuf>,
    /// GFIT checkpoint; embeds the --dataset training split.
    #[arg(long, requires = "dataset")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SeparabilityArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint of a model trained on coarse labels.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = ProbeConfig::default().lr)]
    pub probe_lr: f64,
    #[arg(long, default_value_t = ProbeConfig::default().batch_size)]
    pub probe_batch_size: usize,
    #[command(flatten)]
    pub knn: KnnOptions,
}

#[derive(Debug, Args)]
pub struct SweepLambdaArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub training: TrainingOptions,
    /// Instance-loss weights to train with.
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1.0,1.2,1.4")]
    pub grid: Vec<f64>,
    #[command(flatten)]
    pub knn: KnnOptions,
}
