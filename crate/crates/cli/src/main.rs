mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vladbuff_core::Error;

#[derive(Parser, Debug)]
#[command(name = "vladbuff", version, about = "Burst-aware VLAD aggregation toolkit")]
pub struct Cli {
    /// TOML pipeline configuration. Missing keys take the defaults.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub paths: PathOverrides,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

/// Path overrides; each can also come from the environment.
#[derive(Args, Debug, Default)]
pub struct PathOverrides {
    /// Manifest used by fit and train.
    #[arg(long, global = true, env = "VLADBUFF_MANIFEST")]
    pub manifest: Option<PathBuf>,
    /// Manifest used by aggregate and eval.
    #[arg(long, global = true, env = "VLADBUFF_EVAL_MANIFEST")]
    pub eval_manifest: Option<PathBuf>,
    /// Model bundle directory.
    #[arg(long, global = true, env = "VLADBUFF_BUNDLE")]
    pub bundle: Option<PathBuf>,
    /// Output directory for descriptors.
    #[arg(long, global = true, env = "VLADBUFF_DESCRIPTORS")]
    pub descriptors: Option<PathBuf>,
    /// Output directory for reports, traces and generated data.
    #[arg(long, global = true, env = "VLADBUFF_OUTPUT")]
    pub output: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit projection, vocabulary and assignment; write a model bundle.
    Fit(FitArgs),
    /// Write one descriptor per manifest entry.
    Aggregate(AggregateArgs),
    /// Train a bundle with the triplet loss, or check gradients.
    Train(TrainArgs),
    /// Compute Recall@K on the evaluation manifest.
    Eval(EvalArgs),
    /// Time projection plus aggregation across pre-pool sizes.
    Bench(BenchArgs),
    /// Generate the synthetic burst benchmark.
    Gen(GenArgs),
    /// Render a bench report as an SVG of time against dimension.
    Plot(PlotArgs),
    /// Print the resolved configuration and its hash.
    ShowConfig,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub prepool_dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable the burst weighting (plain NetVLAD).
    #[arg(long)]
    pub no_burst: bool,
}

#[derive(Args, Debug)]
pub struct AggregateArgs {
    /// Recompute descriptors that are already up to date.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run the finite-difference gradient suite instead of training.
    #[arg(long)]
    pub check_grads: bool,
    /// Number of random configurations for --check-grads.
    #[arg(long, default_value_t = 50)]
    pub grad_cases: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the trained bundle (default: <output>/trained).
    #[arg(long)]
    pub out_bundle: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Also evaluate a baseline and report per-K deltas. Without a value the
    /// baseline is the same bundle with the burst weighting disabled.
    #[arg(long, num_args = 0..=1, value_name = "BASELINE_BUNDLE")]
    pub compare: Option<Option<PathBuf>>,
    /// Report path (default: <output>/recall.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Also write a CSV next to the JSON report.
    #[arg(long)]
    pub csv: bool,
    /// Also write an SVG plot next to the JSON report.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Bench report JSON.
    pub input: PathBuf,
    /// Output SVG (default: input with an .svg extension).
    pub output: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err
        .chain()
        .any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_usage));
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
