use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod artifacts;
mod commands;
mod diff;
mod error;

/// Few-shot classification pipeline over property tokens.
#[derive(Debug, Parser)]
#[command(name = "proptok", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic bundle with planted class and property structure.
    GenSynth(GenSynthArgs),
    /// Cluster the pooled description embeddings.
    Cluster(ClusterCmd),
    /// Pick the top-M clusters per class and build training pools.
    Select(SelectCmd),
    /// Train the property-token generator.
    TrainMpg(TrainMpgCmd),
    /// Build the caches and fine-tune keys and mixing weights.
    TrainCache(TrainCacheCmd),
    /// Score the query split and write report.json.
    Eval(EvalCmd),
    /// Run every stage from cluster to eval.
    Run(RunCmd),
    /// Compare the accuracy fields of two reports.
    ReportDiff {
        a: PathBuf,
        b: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    #[arg(long, default_value_t = 20)]
    pub queries: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 9)]
    pub patches: usize,
    #[arg(long, default_value_t = 3)]
    pub props: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct Paths {
    /// Bundle manifest, or the directory holding it.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for stage artifacts.
    #[arg(long)]
    pub run: PathBuf,
    /// Pipeline seed; defaults to the manifest seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    /// Cluster count, or "auto" for half the class count rounded up.
    #[arg(long, default_value = "auto")]
    pub k: String,
    #[arg(long, default_value_t = proptok::propmine::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    /// Properties per class; defaults to the manifest's M.
    #[arg(long)]
    pub props: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct MpgArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// FFN hidden width; defaults to D.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.3)]
    pub tau: f64,
    #[arg(long, default_value_t = 100)]
    pub negatives: usize,
    #[arg(long, default_value_t = 0.1)]
    pub hard_start: f64,
    #[arg(long, default_value_t = 0.4)]
    pub hard_end: f64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
}

#[derive(Debug, Clone, Args)]
pub struct CacheArgs {
    #[arg(long, default_value_t = 15)]
    pub cache_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub cache_lr: f64,
    #[arg(long, default_value_t = 128)]
    pub cache_batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub warmup: f64,
    #[arg(long, default_value_t = 5.5)]
    pub beta_s: f64,
    #[arg(long, default_value_t = 100.0)]
    pub logit_scale: f64,
}

#[derive(Debug, Args)]
pub struct ClusterCmd {
    #[command(flatten)]
    pub paths: Paths,
    #[command(flatten)]
    pub cluster: ClusterArgs,
}

#[derive(Debug, Args)]
pub struct SelectCmd {
    #[command(flatten)]
    pub paths: Paths,
    #[command(flatten)]
    pub select: SelectArgs,
}

#[derive(Debug, Args)]
pub struct TrainMpgCmd {
    #[command(flatten)]
    pub paths: Paths,
    #[command(flatten)]
    pub mpg: MpgArgs,
}

#[derive(Debug, Args)]
pub struct TrainCacheCmd {
    #[command(flatten)]
    pub paths: Paths,
    #[command(flatten)]
    pub cache: CacheArgs,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[command(flatten)]
    pub paths: Paths,
    /// Used only when no trained cache exists.
    #[arg(long, default_value_t = 5.5)]
    pub beta_s: f64,
    /// Used only when no trained cache exists.
    #[arg(long, default_value_t = 100.0)]
    pub logit_scale: f64,
}

#[derive(Debug, Args)]
pub struct RunCmd {
    #[command(flatten)]
    pub paths: Paths,
    #[command(flatten)]
    pub cluster: ClusterArgs,
    #[command(flatten)]
    pub select: SelectArgs,
    #[command(flatten)]
    pub mpg: MpgArgs,
    #[command(flatten)]
    pub cache: CacheArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a),
        Command::Cluster(c) => commands::cluster(&c.paths, &c.cluster),
        Command::Select(c) => commands::select(&c.paths, &c.select),
        Command::TrainMpg(c) => commands::train_mpg(&c.paths, &c.mpg),
        Command::TrainCache(c) => commands::train_cache(&c.paths, &c.cache),
        Command::Eval(c) => commands::eval(&c.paths, c.beta_s, c.logit_scale),
        Command::Run(c) => commands::run_all(&c),
        Command::ReportDiff { a, b } => diff::report_diff(&a, &b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
