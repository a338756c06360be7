mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rrm_core::bench::ExperimentId;
use rrm_core::envgen::{Labeler, Layout};
use rrm_core::optim::SystemModel;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config files or inputs that do not fit the command.
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<rrm_core::Error> for CliError {
    fn from(e: rrm_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Maps a validation failure to a config error.
pub fn invalid(e: rrm_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "rrm", version, about = "Radio resource management benchmark under non-stationary fading")]
#[command(after_help = "The default seed is 1; set RRM_SEED to change it. A `seed` in the config file or --seed wins over both.")]
struct Cli {
    /// Worker threads for generation, labeling and training (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

/// Options every data command shares.
#[derive(Debug, Args)]
struct Common {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a channel dataset.
    Generate(GenerateArgs),
    /// Label a dataset with a reference algorithm.
    Label(LabelArgs),
    /// Train a network preset on a dataset's train/val split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Train and evaluate a DQN agent online.
    Dqn(DqnArgs),
    /// Run an experiment driver and write its tables.
    Bench(BenchArgs),
    /// Summarize the runs under a results directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// System model: sm1, sm2a, sm2b or sm3 [default: sm1].
    #[arg(long)]
    model: Option<SystemModel>,
    /// Base stations B [default: 1].
    #[arg(long)]
    bs: Option<usize>,
    /// Users U [default: 1].
    #[arg(long)]
    users: Option<usize>,
    /// Subcarriers N [default: 32].
    #[arg(long)]
    subcarriers: Option<usize>,
    /// Per-BS budget in watts [default: 1e-5].
    #[arg(long)]
    p_max: Option<f64>,
    /// Noise variance in watts [default: 1e-9].
    #[arg(long)]
    sigma2: Option<f64>,
    /// Geometry: none, paired or nearest [default: none for sm1/sm2a, paired for sm2b, nearest for sm3].
    #[arg(long, value_parser = parse_layout)]
    layout: Option<Layout>,
    /// Largest path count of the pair universe [default: 32].
    #[arg(long)]
    l_max: Option<usize>,
    /// Largest wave count of the pair universe [default: 128].
    #[arg(long)]
    m_max: Option<usize>,
    /// Non-stationarity factor: pairs drawn from the universe [default: 10].
    #[arg(long)]
    k: Option<usize>,
    /// Samples to generate [default: 5000].
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// waterfill, greedy+waterfill, wmmse, iterative-sm3, random or maxpower [default: the model's reference].
    #[arg(long)]
    labeler: Option<Labeler>,
    /// Write the labeled dataset here instead of in place.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Architecture preset: sm1, model-b, sm2b or sm3-conv.
    #[arg(long)]
    preset: String,
    /// Checkpoint file to write; the epoch history goes next to it as `<stem>.history.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Power-violation weight [default: 1 for sm1/model-b, 3e4 for sm3-conv; sm2b uses MSE].
    #[arg(long)]
    beta: Option<f64>,
    /// Epoch limit [default: 100].
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs [default: 50].
    #[arg(long)]
    patience: Option<usize>,
    /// Mini-batch size [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 1e-3].
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DqnEnv {
    /// Single-carrier interference channel with B paired links.
    Sc,
    /// One OFDM link with N subcarriers.
    Ofdm,
}

#[derive(Debug, Args)]
pub struct DqnArgs {
    #[command(flatten)]
    common: Common,
    /// Environment.
    #[arg(long, value_enum, default_value = "sc")]
    env: DqnEnv,
    /// Output directory for `episodes.csv` and `eval.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Links B of the sc environment.
    #[arg(long, default_value_t = 3)]
    users: usize,
    /// Subcarriers N of the ofdm environment.
    #[arg(long, default_value_t = 16)]
    subcarriers: usize,
    /// Training episodes, one channel draw each.
    #[arg(long, default_value_t = 5000)]
    episodes: usize,
    /// Greedy evaluation episodes on fresh draws.
    #[arg(long, default_value_t = 500)]
    eval_episodes: usize,
    /// Per-link budget in watts [default: 1e-5].
    #[arg(long)]
    p_max: Option<f64>,
    /// Noise variance in watts [default: 1e-20 for sc, 4e-19 for ofdm].
    #[arg(long)]
    sigma2: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Experiment id: cs1-subcarriers, cs1-trainsize, cs1-layers, cs1-nonstat, ageing, semi-online,
    /// cs2-nonstat, cs2b-users, dqn-curves, cs3-time, cs3-rate or cs3-cdf.
    id: ExperimentId,
    /// Comma-separated seeds [default: the master seed].
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Results root [default: results].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name [default: derived from the config hash and seeds].
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results root to scan.
    #[arg(long, default_value = "results")]
    results: PathBuf,
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown layout `{s}` (expected none, paired or nearest)"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new().filter_level(cli.log).format_timestamp(None).init();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Label(a) => commands::label(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Dqn(a) => commands::dqn(a),
        Command::Bench(a) => commands::bench(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
