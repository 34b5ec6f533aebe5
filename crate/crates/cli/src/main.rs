//! `protoflow` command-line front end.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<protoflow::Error> for CliError {
    fn from(e: protoflow::Error) -> Self {
        use protoflow::Error as E;
        let code = match &e {
            E::Diverged { .. } => 3,
            E::Mismatch(_) => 4,
            E::Config(_) | E::Format(_) | E::Validation(_) | E::Sampling(_) | E::Io(_) => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { code: 1, message: e.to_string() }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self { code: 1, message: e.to_string() }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "protoflow", version, about = "Few-shot prototype optimization with learned gradient flows")]
pub struct Cli {
    /// Seed for every random choice; falls back to PROTOFLOW_SEED, then the config.
    #[arg(long, global = true, env = "PROTOFLOW_SEED")]
    pub seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic Gaussian-cluster dataset.
    Synth(SynthArgs),
    /// Convert a dataset between PFEB and CSV (chosen by extension).
    Convert { input: PathBuf, output: PathBuf },
    /// Print the default training config as JSON.
    Config,
    /// Meta-train a flow network and solver.
    Train(TrainArgs),
    /// Mean accuracy with 95% interval, next to the mean-prototype baseline.
    Eval(EvalArgs),
    /// Cosine similarity of initial and final prototypes to the all-sample class means.
    ProtoBias(EvalArgs),
    /// Cosine similarity of support-mean and inferred gradients to the population gradient.
    GradBias(EvalArgs),
    /// Global errors and empirical orders of the integrators.
    BenchSolvers(BenchSolversArgs),
    /// Flow evaluation wall times over a grid of sample counts.
    BenchRuntime(BenchRuntimeArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 30)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    pub center_scale: f64,
    #[arg(long, default_value_t = 0.35)]
    pub noise: f64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run config; omitted keys take their defaults (see `protoflow config`).
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Overrides as key=value, by dotted path or short alias.
    #[arg(long = "set", num_args = 1.., value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Transductive,
    Inductive,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Train/val/test class counts, ascending class id order.
    #[arg(long, value_delimiter = ',', default_values_t = [20usize, 5, 5])]
    pub split: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub part: Part,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Defaults to 600 for eval and 1000 for the bias diagnostics.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub k_shot: usize,
    #[arg(long, default_value_t = 15)]
    pub queries: usize,
    /// Defaults to the mode the checkpoint was trained in.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchSolversArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32, 64])]
    pub steps: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub integral_time: f64,
    /// Also compare solvers on a trained checkpoint.
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [20usize, 5, 5])]
    pub split: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchRuntimeArgs {
    #[arg(long, value_delimiter = ',', default_values_t = ["gradnet".to_string(), "e2gradnet".to_string()])]
    pub flows: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub n_way: usize,
    #[arg(long, default_value_t = 5)]
    pub k_shot: usize,
    #[arg(long, default_value_t = 15)]
    pub queries: usize,
    /// Multipliers applied to both shots and queries.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2])]
    pub scales: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub modules: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn configure_threads() -> CliResult {
    if let Ok(v) = std::env::var("PROTOFLOW_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::usage(format!("PROTOFLOW_THREADS must be a count, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let defaults = serde_json::to_string_pretty(&config::RunConfig::default()).expect("default config serializes");
    let command = Cli::command().mut_subcommand("train", |c| {
        c.after_long_help(format!("Defaults:\n{defaults}\n\n--set aliases:\n{}", config::alias_help()))
    });
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match configure_threads().and_then(|()| commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
