//! `hytnas`: synthesize cubes, search, derive, train, predict and evaluate.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for usage or
//! configuration errors.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hytnas::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_usage() => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "hytnas", version, about = "Hybrid spatial/spectral architecture search for hyperspectral images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled cube.
    Synth(SynthArgs),
    /// Run the supernet search and save its checkpoint and record.
    Search(SearchArgs),
    /// Derive a genotype from a search checkpoint.
    Derive(DeriveArgs),
    /// Train the compact network built from a genotype.
    Train(TrainArgs),
    /// Predict a class map with a trained model.
    Predict(PredictArgs),
    /// Score a predicted class map against held-out labels.
    Eval(EvalArgs),
    /// Print the candidate-operation menus.
    #[command(alias = "ops")]
    OpsDump(OpsArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayoutKind {
    Blocks,
    Voronoi,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub bands: usize,
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long, default_value_t = 48)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, value_enum, default_value_t = LayoutKind::Voronoi)]
    pub layout: LayoutKind,
    /// Block side for the blocks layout.
    #[arg(long, default_value_t = 12)]
    pub block: usize,
    /// Seed points for the voronoi layout.
    #[arg(long, default_value_t = 8)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
    #[arg(long, env = "HYTNAS_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Cube directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

/// Run configuration: a preset, optionally a JSON file over it, then flag
/// overrides (flags win).
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// pavia, houston or desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// Seed for the split, the search and training.
    #[arg(long, env = "HYTNAS_SEED")]
    pub seed: Option<u64>,
    /// Override any field, e.g. `--set train.iters=500`. Values are JSON,
    /// or plain strings.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// hybrid, spatial_only or spectral_only.
    #[arg(long)]
    pub space: Option<String>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub search_epochs: Option<usize>,
    #[arg(long)]
    pub iters_per_epoch: Option<usize>,
    #[arg(long)]
    pub search_patch: Option<usize>,
    #[arg(long)]
    pub search_batch: Option<usize>,
    #[arg(long)]
    pub train_patch: Option<usize>,
    #[arg(long)]
    pub train_batch: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub val_iters: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Train without the attention block.
    #[arg(long)]
    pub no_transformer: bool,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Cube directory (falls back to `data.cube` in the configuration).
    #[arg(long)]
    pub cube: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DeriveArgs {
    /// Search checkpoint (`supernet.ckpt`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub cube: Option<PathBuf>,
    #[arg(long)]
    pub genotype: PathBuf,
    /// Split file from `search`; drawn from the configuration if absent.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Trained model (`model.ckpt`).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cube: PathBuf,
    /// Window side; defaults to the model's training patch.
    #[arg(long)]
    pub window: Option<usize>,
    /// Average overlapping half-stride windows (default).
    #[arg(long, overrides_with = "no_overlap")]
    pub overlap: bool,
    /// Tile with stride equal to the window instead.
    #[arg(long)]
    pub no_overlap: bool,
    /// Windows per forward pass.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Write attention weights of one window to this directory.
    #[arg(long, value_name = "DIR")]
    pub dump_attention: Option<PathBuf>,
    /// Top-left corner `ROW,COL` of the window whose attention is dumped.
    #[arg(long, default_value = "0,0")]
    pub attention_origin: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSet {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Output directory of `predict`.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalSet::Test)]
    pub set: EvalSet,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OpsArgs {
    /// Also write the menus to this file.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, &argv),
        Command::Search(a) => commands::search(&a, &argv),
        Command::Derive(a) => commands::derive(&a, &argv),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Predict(a) => commands::predict(&a, &argv),
        Command::Eval(a) => commands::eval(&a, &argv),
        Command::OpsDump(a) => commands::ops_dump(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
