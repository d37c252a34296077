//! `dxsep`: phantoms, reference separation, training and evaluation.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
//! `DXS_THREADS` caps the number of worker threads; 1 is determinism mode,
//! although outputs never depend on the worker count.

mod commands;
mod failure;
mod predictions;
mod workers;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use failure::{Failure, Kind};

#[derive(Parser, Debug)]
#[command(name = "dxsep", version, about = "Water/fat separation on synthetic multi-echo phantoms")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults, unknown keys are rejected.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset and its manifest.
    Phantom(PhantomArgs),
    /// Separate every subject with the reference-surrogate method.
    Reference(ReferenceArgs),
    /// Cross-validated U-Net training on one echo configuration.
    Train(TrainArgs),
    /// Liver report, scatter data and PNG exports for trained predictions.
    Eval(EvalArgs),
    /// Finite-difference check of every autodiff op and a small U-Net.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Number of subjects.
    #[arg(long, default_value_t = 60)]
    pub n: usize,
    /// Master seed; subject seeds are derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReferenceArgs {
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Input echoes: `all:K`, `odd:K`, `even:K` or a list such as `1,3,5`.
    #[arg(long)]
    pub echoes: Option<String>,
    /// Folds to train, e.g. `0` or `0,2`; all folds by default.
    #[arg(long, value_delimiter = ',')]
    pub folds: Option<Vec<usize>>,
    /// Override the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Against {
    /// Phantom ground truth.
    Truth,
    /// The reference-surrogate separation the network was trained on.
    Reference,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// The `predictions/` directory written by `train`.
    #[arg(long, value_name = "DIR")]
    pub predictions: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Liver FF the predictions are scored against.
    #[arg(long, value_enum, default_value_t = Against::Truth)]
    pub against: Against,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Corrupt analytic gradients by 1%; the check must then fail.
    #[arg(long)]
    pub fault_injection: bool,
    /// Only f64 is checked; f32 is accepted with a warning.
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let workers = workers::worker_count().map_err(|e| Failure::new(Kind::Usage, anyhow::anyhow!(e)))?;
    let config = commands::load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Phantom(a) => commands::phantom(&config, &a),
        Command::Reference(a) => commands::reference(&config, &a, workers),
        Command::Train(a) => commands::train(config, &a, workers),
        Command::Eval(a) => commands::eval(&config, &a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Kind::Usage as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
