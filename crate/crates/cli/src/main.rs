//! `faithful`: train the pose-invariant aligner on synthetic data, curate pose
//! tracks, run diagnostics and check gradients.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical abort,
//! 3 verification failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faithful_core::aligner::Pooling;

#[derive(Debug, Parser)]
#[command(name = "faithful", version, about = "Pose-invariant identity aligner: training, curation and diagnostics")]
struct Cli {
    /// Log verbosity: repeat for more detail. `RUST_LOG` overrides it.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on synthetic pairs; writes checkpoint.json, metrics.csv and run_meta.json.
    Train(TrainArgs),
    /// Filter pose tracks (JSONL) and write a pair manifest (JSON).
    Curate(CurateArgs),
    /// Diagnostics on a trained checkpoint.
    Analyze(AnalyzeArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory for all outputs; overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Seed; overrides the config and FAITHFUL_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of optimizer steps; overrides `train.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Pooling mode (max, mean, sum); overrides `train.pooling`.
    #[arg(long)]
    pooling: Option<Pooling>,
    /// Pairs per batch; overrides `train.n_pairs_per_batch`.
    #[arg(long)]
    n_pairs: Option<usize>,
    /// Learning rate; overrides `train.learning_rate`.
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct CurateArgs {
    /// Pose tracks, one JSON object per line.
    #[arg(long)]
    input: PathBuf,
    /// Manifest destination.
    #[arg(long)]
    output: PathBuf,
    /// Optional run configuration whose `curation` section supplies defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tracks need a pose variation strictly above this (degrees) [default: 120].
    #[arg(long)]
    threshold: Option<f64>,
    /// Tracks with more faces than this in any frame are rejected [default: 1].
    #[arg(long)]
    max_faces: Option<u32>,
    /// Odd median-filter window applied to angle series before scoring.
    #[arg(long)]
    median_window: Option<usize>,
    /// JSON object mapping video_id to prompt text.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Seed for pair sampling; overrides the config and FAITHFUL_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(subcommand)]
    what: Analysis,
}

#[derive(Debug, Args)]
struct CommonAnalyze {
    /// Run configuration used for training (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Trained checkpoint; its dimensions must match the config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory for the CSV; overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Seed of the synthetic world; overrides the config and FAITHFUL_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Analysis {
    /// Top-k atom statistics per pose bucket; writes activation_stats.csv.
    Activations {
        #[command(flatten)]
        common: CommonAnalyze,
        /// Atoms per top-k set; overrides `analysis.k`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// 2-D PCA of held-out identities; writes projection.csv.
    Project {
        #[command(flatten)]
        common: CommonAnalyze,
        /// Held-out identities; overrides `analysis.projection_identities`.
        #[arg(long)]
        identities: Option<usize>,
        /// Poses per identity; overrides `analysis.projection_poses`.
        #[arg(long)]
        poses: Option<usize>,
    },
    /// Representation drift under Euler-angle noise; writes perturbation.csv.
    Perturb {
        #[command(flatten)]
        common: CommonAnalyze,
        /// Comma-separated noise ranges in degrees; overrides `analysis.perturb_ranges`.
        #[arg(long, value_delimiter = ',')]
        ranges: Option<Vec<f64>>,
    },
    /// Train a grid of configs over shared seeds; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: CommonAnalyze,
        /// Comma-separated pooling modes.
        #[arg(long, value_delimiter = ',')]
        pooling: Option<Vec<Pooling>>,
        /// Comma-separated dictionary sizes C.
        #[arg(long, value_delimiter = ',')]
        atoms: Option<Vec<usize>>,
        /// Comma-separated Euler injection settings (true/false).
        #[arg(long, value_delimiter = ',')]
        euler: Option<Vec<bool>>,
        /// Comma-separated training seeds shared by every config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Noise range in degrees for the drift column.
        #[arg(long)]
        perturb_range: Option<f64>,
    },
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Tokens per face (L).
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    /// Raw features per token (F).
    #[arg(long, default_value_t = 6)]
    features: usize,
    /// Embedding width (D).
    #[arg(long, default_value_t = 12)]
    dim: usize,
    /// Dictionary atoms (C).
    #[arg(long, default_value_t = 16)]
    atoms: usize,
    /// Identity pairs in the batch.
    #[arg(long, default_value_t = 3)]
    pairs: usize,
    /// Sampled coordinates per parameter tensor.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Check only this pooling mode; all modes by default.
    #[arg(long)]
    pooling: Option<Pooling>,
    /// Check only this Euler setting; both by default.
    #[arg(long)]
    euler: Option<bool>,
    /// Seed; overrides FAITHFUL_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Corrupt the analytic gradient (negative control).
    #[arg(long, hide = true)]
    corrupt: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Curate(a) => commands::curate(a),
        Command::Analyze(a) => commands::analyze(a.what),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
