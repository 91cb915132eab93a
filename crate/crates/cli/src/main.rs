mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use omnitft::par::{self, Execution};

use config::{Failure, EXIT_CONFIG, EXIT_OTHER, EXIT_SCHEMA_MISMATCH};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  any other failure (I/O, malformed data, numerical errors)
  2  configuration error: bad flags, missing or invalid schema/config file
  3  training diverged (the last good model is still written)
  4  data or checkpoint does not match the schema

Environment:
  OMNITFT_THREADS  caps the worker thread count

Every command writes <out>/manifest.json listing inputs and artifacts with SHA-256 digests.";

#[derive(Parser)]
#[command(name = "omnitft", version, about = "Multi-horizon quantile forecasting for irregular clinical-style time series", after_help = EXIT_HELP)]
struct Cli {
    /// Run single-threaded regardless of OMNITFT_THREADS.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a regime-switching synthetic cohort with ground-truth labels.
    Synth(SynthArgs),
    /// Preprocess, label, and train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint and export metrics, importance and trajectories.
    Eval(EvalArgs),
    /// Label windows as stable or volatile and summarize class balance.
    Label(LabelArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub patients: usize,
    /// Stationary probability of the volatile regime.
    #[arg(long, default_value_t = 0.3)]
    pub shock_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid steps per patient.
    #[arg(long, default_value_t = 160)]
    pub steps: usize,
    #[arg(long, default_value_t = 72)]
    pub encoder_len: usize,
    #[arg(long, default_value_t = 12)]
    pub horizon_len: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory containing events.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Schema JSON; defaults to <data>/schema.json.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Run configuration JSON; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Validate inputs and configuration, print a summary, and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory containing events.csv (and optionally schema.json).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Threshold,
    Hmm,
}

#[derive(Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Schema JSON; defaults to <data>/schema.json.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "threshold")]
    pub method: Method,
    /// JSON of the form {"delta": {"<target>": value}}.
    #[arg(long)]
    pub delta_config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Seed for HMM initialization and the patient split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn threads_from_env() -> anyhow::Result<Option<usize>> {
    match std::env::var("OMNITFT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Config(format!(
                "OMNITFT_THREADS must be a positive integer, got {v:?}"
            ))
            .into()),
        },
        Err(_) => Ok(None),
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.exit_code();
        }
        if let Some(omnitft::trainer::TrainError::InvalidConfig(_)) = cause.downcast_ref() {
            return EXIT_CONFIG;
        }
        if let Some(omnitft::ingest::IngestError::UnknownFeature { .. }) = cause.downcast_ref() {
            return EXIT_SCHEMA_MISMATCH;
        }
    }
    EXIT_OTHER
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = threads_from_env()?;
    if let Some(n) = threads {
        par::init_threads(n);
    }
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let ctx = commands::Context { exec, threads };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, &a),
        Command::Train(a) => commands::train(&ctx, &a),
        Command::Eval(a) => commands::eval(&ctx, &a),
        Command::Label(a) => commands::label(&ctx, &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
