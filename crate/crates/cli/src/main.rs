use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use recourse_core::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "recourse",
    version,
    about = "Train classifiers that keep recourse available, compute recourse and calibrate thresholds"
)]
struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset and its config.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus the per-epoch log.
    Train(TrainArgs),
    /// Set the decision threshold of a checkpoint.
    Calibrate(CalibrateArgs),
    /// Compute recourse for instances of one split.
    Recourse(RecourseArgs),
    /// Performance, recourse, robustness and disparity metrics.
    Evaluate(EvaluateArgs),
    /// Retrain or re-threshold across a grid of values and seeds.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_parser = ["german", "adult"])]
    pub dataset: String,
    #[arg(long, default_value_t = 1000)]
    pub rows: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving `<dataset>.toml` and `<dataset>.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset rows (CSV).
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 0.8)]
    pub lambda: f64,
    /// Seed for parameter init, shuffling and dropout.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed for the train/validation/test split (defaults to --seed).
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0.002)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    /// Use the small-dataset schedule (50 epochs, batch 30) instead of 15 epochs, batch 15.
    #[arg(long)]
    pub small: bool,
    /// Override the action budget from the dataset config.
    #[arg(long)]
    pub delta_max: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Output directory for `checkpoint.json` and `train_log.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Tuning for the gradient-descent recourse search.
#[derive(Args, Debug, Clone)]
pub struct SearchArgs {
    /// Initial weight of the action-size penalty.
    #[arg(long, default_value_t = 0.001)]
    pub gd_lambda0: f64,
    #[arg(long, default_value_t = 0.05)]
    pub gd_step_size: f64,
    #[arg(long, default_value_t = 500)]
    pub gd_steps: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyArg {
    F1Max,
    Pare,
    PareThenF1,
    Fixed,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for recourse_core::data::Split {
    fn from(s: SplitArg) -> Self {
        use recourse_core::data::Split;
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = PolicyArg::Pare)]
    pub threshold_policy: PolicyArg,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Threshold for the fixed policy.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Grid size below the calibrated bound for pare-then-f1.
    #[arg(long, default_value_t = 10)]
    pub increments: usize,
    #[arg(long, default_value = "lp")]
    pub algorithm: recourse_core::recourse::RecourseAlgorithm,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the updated checkpoint (defaults to in place).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Args, Debug)]
pub struct RecourseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "gd")]
    pub algorithm: recourse_core::recourse::RecourseAlgorithm,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Comma-separated positions within the split (default: all).
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<usize>,
    /// File of positions separated by whitespace or commas.
    #[arg(long, conflicts_with = "ids")]
    pub ids_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Recourse algorithms to report (default: all three).
    #[arg(long, value_delimiter = ',')]
    pub algorithm: Vec<recourse_core::recourse::RecourseAlgorithm>,
    /// Noise scale for the robustness and brittleness checks.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Read --noise as a variance rather than a standard deviation.
    #[arg(long)]
    pub noise_is_variance: bool,
    /// Validation precision used to pick the threshold for the group comparison.
    #[arg(long, default_value_t = 0.65)]
    pub target_precision: f64,
    /// Also run the original-vs-recourse distinguisher.
    #[arg(long)]
    pub probe: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON output (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisArg {
    Lambda,
    Threshold,
    DeltaMax,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    /// Comma-separated values (default: 0, 0.2, …, 2.0 for lambda; 0, 0.1, …, 1 for threshold).
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    /// Comma-separated split seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    pub algorithm: Vec<recourse_core::recourse::RecourseAlgorithm>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Output directory for `sweep_rows.csv`, `sweep_summary.csv` and `sweep.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub search: SearchArgs,
}

/// Exit code for a failure: 2 configuration, 3 data, 4 numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Parse { .. } | Error::Shape { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_)) => 3,
        Some(Error::Numeric(_) | Error::SolverFailure(_) | Error::UnsupportedProjection) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Recourse(a) => commands::recourse(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
