//! `paka`: data generation, training, evaluation and diagnostics for dense
//! kernel-alignment self-distillation.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use paka_core::config::{BankSplit, Weights};
use paka_core::encoder::FeatureSource;
use paka_core::kernel::LossKind;

#[derive(Debug, Parser)]
#[command(name = "paka", version, about = "Patch-level kernel alignment experiments")]
struct Cli {
    /// JSON experiment configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic labelled dataset.
    GenData(GenDataArgs),
    /// Distil a student from its EMA teacher on a dataset.
    Train(TrainArgs),
    /// Evaluate frozen features of a checkpoint.
    Eval {
        #[command(subcommand)]
        protocol: EvalProtocol,
    },
    /// Compare the loss stability of two training runs.
    CompareLosses(CompareArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    min_shapes: Option<usize>,
    #[arg(long)]
    max_shapes: Option<usize>,
    /// Photometric variation between scenes and shapes, in [0, 1].
    #[arg(long)]
    nuisance: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Paka,
    Gram,
    Hsic,
    Mmd,
}

impl From<LossArg> for LossKind {
    fn from(v: LossArg) -> Self {
        match v {
            LossArg::Paka => LossKind::Paka,
            LossArg::Gram => LossKind::Gram,
            LossArg::Hsic => LossKind::Hsic,
            LossArg::Mmd => LossKind::Mmd,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Head,
    Backbone,
}

impl From<SourceArg> for FeatureSource {
    fn from(v: SourceArg) -> Self {
        match v {
            SourceArg::Head => FeatureSource::Head,
            SourceArg::Backbone => FeatureSource::Backbone,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for checkpoint.paka, steps.csv and config.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_local: Option<usize>,
    /// Minimum fraction of each local crop covered by both globals.
    #[arg(long)]
    min_overlap: Option<f64>,
    #[arg(long)]
    teacher_aug: Option<f64>,
    #[arg(long)]
    student_aug: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    feature_source: Option<SourceArg>,
    #[arg(long)]
    eval_fraction: Option<f64>,
    /// Write 0 in the wall_ms column so repeated runs give identical logs.
    #[arg(long)]
    no_timing: bool,
    /// Store checkpoint tensors as f32 instead of f64.
    #[arg(long)]
    f32: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightsArg {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BankArg {
    Train,
    Eval,
}

#[derive(Debug, Args)]
struct EvalCommon {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output path of metrics.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated evaluation seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_enum)]
    weights: Option<WeightsArg>,
    #[arg(long, value_enum)]
    feature_source: Option<SourceArg>,
    #[arg(long)]
    eval_fraction: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum EvalProtocol {
    /// k-means with K clusters, majority mapping to classes, mIoU.
    Overcluster {
        #[command(flatten)]
        common: EvalCommon,
        /// Cluster count (defaults to three times the class count).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Patch nearest-neighbour label transfer from a memory bank.
    Nn {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long)]
        k: Option<usize>,
        /// Bank down-sampling ratios, e.g. 1,8,64.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        bank: Option<BankArg>,
        /// Allow a query patch to retrieve itself when the bank is the eval split.
        #[arg(long)]
        no_exclude_self: bool,
    },
    /// Linear probe on frozen patch features.
    Linear {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// steps.csv of the first run.
    #[arg(long)]
    a: PathBuf,
    /// steps.csv of the second run.
    #[arg(long)]
    b: PathBuf,
    /// CV window in steps (defaults to the whole run).
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value = "stability.json")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict the loss checks to one objective.
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Random instances per kernel loss.
    #[arg(long, default_value_t = 20)]
    instances: u64,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("PAKA_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("PAKA_THREADS must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| commands::run(cli));
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

impl From<WeightsArg> for Weights {
    fn from(v: WeightsArg) -> Self {
        match v {
            WeightsArg::Teacher => Weights::Teacher,
            WeightsArg::Student => Weights::Student,
        }
    }
}

impl From<BankArg> for BankSplit {
    fn from(v: BankArg) -> Self {
        match v {
            BankArg::Train => BankSplit::Train,
            BankArg::Eval => BankSplit::Eval,
        }
    }
}
