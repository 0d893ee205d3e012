//! `lilu`: generate problem sets, train learned ILU preconditioners, and
//! evaluate them inside GMRES.

mod commands;
mod resolve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use learned_ilu::Error;

#[derive(Parser, Debug)]
#[command(name = "lilu", version, about = "Learned incomplete LU preconditioners for GMRES")]
struct Cli {
    /// Worker threads for generation, validation and evaluation [default: all cores]
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate perturbed Poisson problems with train/val/test splits
    Generate(GenerateArgs),
    /// Train a message-passing model that predicts ILU factors
    Train(TrainArgs),
    /// Evaluate preconditioners on a split and write the summary table
    Eval(EvalArgs),
    /// Dump singular values of the preconditioned operator for one problem
    Spectrum(SpectrumArgs),
}

/// Every flag may also be given as `key = value` in the config file, with
/// dashes or underscores. Flags win over the file.
#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Key-value config file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory (required)
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Grid side k; matrices have n = k² rows [default: 20]
    #[arg(long, value_name = "K")]
    pub grid: Option<String>,
    /// Training problems [default: 50]
    #[arg(long, value_name = "COUNT")]
    pub train: Option<String>,
    /// Validation problems [default: 5]
    #[arg(long, value_name = "COUNT")]
    pub val: Option<String>,
    /// Test problems [default: 5]
    #[arg(long, value_name = "COUNT")]
    pub test: Option<String>,
    /// Base seed [default: 0]
    #[arg(long, value_name = "SEED")]
    pub seed: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Key-value config file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `generate` (required)
    #[arg(long, value_name = "DIR")]
    pub data: Option<String>,
    /// Output directory for model.json, last_model.json and history.csv (required)
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Loss: max, min, min-hat or combined [default: max]
    #[arg(long, value_name = "LOSS")]
    pub loss: Option<String>,
    /// Weight of the solution term in the combined loss [default: 0.2]
    #[arg(long, value_name = "ALPHA")]
    pub alpha: Option<String>,
    /// Passes over the training split [default: 100]
    #[arg(long, value_name = "N")]
    pub epochs: Option<String>,
    /// Adam learning rate [default: 0.001]
    #[arg(long, value_name = "LR")]
    pub lr: Option<String>,
    /// Global gradient-norm clip [default: 1.0]
    #[arg(long, value_name = "NORM")]
    pub clip: Option<String>,
    /// Lower bound on the magnitude of the diagonal of L [default: 0.0001]
    #[arg(long, value_name = "EPS")]
    pub eps: Option<String>,
    /// Seed for initialization and probe vectors [default: 0]
    #[arg(long, value_name = "SEED")]
    pub seed: Option<String>,
    /// Random probe vectors per loss evaluation [default: 1]
    #[arg(long, value_name = "N")]
    pub hutchinson_samples: Option<String>,
    /// GMRES tolerance of the validation solves [default: 1e-8]
    #[arg(long, value_name = "TOL")]
    pub val_tol: Option<String>,
    /// Node aggregation: mean or sum [default: mean]
    #[arg(long, value_name = "AGG")]
    pub aggregation: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Key-value config file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `generate` (required)
    #[arg(long, value_name = "DIR")]
    pub data: Option<String>,
    /// Output directory (required)
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Model file, needed for `learned`
    #[arg(long, value_name = "FILE")]
    pub model: Option<String>,
    /// Comma-separated list from none, jacobi, ilu0, learned
    /// [default: none,jacobi,ilu0 plus learned when --model is given]
    #[arg(long, value_name = "LIST")]
    pub precond: Option<String>,
    /// Split to evaluate [default: test]
    #[arg(long, value_name = "SPLIT")]
    pub split: Option<String>,
    /// GMRES relative residual tolerance [default: 1e-8]
    #[arg(long, value_name = "TOL")]
    pub tol: Option<String>,
    /// Largest n for dense spectral metrics [default: 2000]
    #[arg(long, value_name = "N")]
    pub dense_cap: Option<String>,
    /// Leave time columns empty so reports are byte-reproducible
    #[arg(long)]
    pub no_timing: bool,
    /// Skip singular values and Frobenius columns
    #[arg(long)]
    pub no_spectral: bool,
    /// Also write SVG histograms
    #[arg(long)]
    pub svg: bool,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    /// Key-value config file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `generate` (required)
    #[arg(long, value_name = "DIR")]
    pub data: Option<String>,
    /// Output directory (required)
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    /// Model file, needed for `learned`
    #[arg(long, value_name = "FILE")]
    pub model: Option<String>,
    /// Comma-separated list from none, jacobi, ilu0, learned
    /// [default: none,jacobi,ilu0 plus learned when --model is given]
    #[arg(long, value_name = "LIST")]
    pub precond: Option<String>,
    /// Split holding the problem [default: test]
    #[arg(long, value_name = "SPLIT")]
    pub split: Option<String>,
    /// Problem index within the split [default: 0]
    #[arg(long, value_name = "INDEX")]
    pub problem: Option<String>,
    /// Largest n for the dense decomposition [default: 2000]
    #[arg(long, value_name = "N")]
    pub dense_cap: Option<String>,
    /// Estimate only the extreme singular values by power iteration
    #[arg(long)]
    pub edges_only: bool,
    /// Power-iteration cap in edges-only mode [default: 2000]
    #[arg(long, value_name = "N")]
    pub power_iters: Option<String>,
    /// Relative power-iteration stopping tolerance [default: 1e-10]
    #[arg(long, value_name = "TOL")]
    pub power_tol: Option<String>,
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;
pub const EXIT_DIVERGENCE: u8 = 5;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Json(_) | Error::Parse { .. } => EXIT_IO,
        Error::IndexOutOfRange { .. } | Error::InvalidStructure(_) | Error::DimensionMismatch { .. } => EXIT_IO,
        Error::Divergence(_) => EXIT_DIVERGENCE,
        _ => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot set up {jobs} worker threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Spectrum(a) => commands::spectrum(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
