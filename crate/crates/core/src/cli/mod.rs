//! Command-line front end: argument parsing, command dispatch, and the
//! exit-code contract (0 pass, 2 input error, 3 convergence or verification failure).

mod commands;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::solver::DEFAULT_SEED;

pub use output::{nats_to_bits, Format};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ceo-rate", version, about = "Berger-Tung rate region of the vector Gaussian CEO problem")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    /// Number of solver starts.
    #[arg(long, default_value_t = 16)]
    pub starts: usize,
    /// Stationarity tolerance of the solver.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    #[arg(long, env = "CEO_RATE_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Use the exhaustive grid search (diagonal instances only).
    #[arg(long)]
    pub oracle: bool,
    /// Grid spacing for `--oracle`.
    #[arg(long, default_value_t = 1e-3)]
    pub oracle_resolution: f64,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Report rates in bits in CSV output (JSON always carries both units).
    #[arg(long)]
    pub bits: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepVar {
    /// The distortion budget.
    D,
    /// Weights `(1 - t) mu + t (1, ..., 1)` for `t` in `[0, 1]`.
    MuRay,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Minimize the weighted sum rate.
    Solve {
        instance: PathBuf,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Solve along a range of `d` or of weights and tabulate the rates.
    Sweep {
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = SweepVar::D)]
        var: SweepVar,
        #[arg(long)]
        lo: f64,
        #[arg(long)]
        hi: f64,
        #[arg(long, default_value_t = 9)]
        steps: usize,
        /// Also write the per-point solutions as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Recover multipliers and check the KKT conditions.
    Kkt {
        instance: PathBuf,
        /// Solution file written by `solve`; solved afresh when absent.
        #[arg(long)]
        solution: Option<PathBuf>,
        /// Residual tolerance of the check.
        #[arg(long, default_value_t = 1e-6)]
        check_tol: f64,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Spectral decomposition of the optimum and its structural checks.
    Decompose {
        instance: PathBuf,
        #[arg(long)]
        solution: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        check_tol: f64,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Entropy inequality, monotone path and bound chain for one test channel.
    VerifyExtremal {
        instance: PathBuf,
        #[arg(long)]
        solution: Option<PathBuf>,
        /// Channel file; the channel matched to the optimum when absent.
        #[arg(long)]
        channel: Option<PathBuf>,
        /// Number of gamma points.
        #[arg(long, default_value_t = crate::extremal::DEFAULT_GRID)]
        grid: usize,
        /// CSV file for the sampled path (columns gamma, g_nats).
        #[arg(long)]
        path_csv: Option<PathBuf>,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Randomized Gaussian checks of the Fisher information identities and inequalities.
    Lemmas {
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long, env = "CEO_RATE_SEED", default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Solve, certify, decompose and verify in order, stopping at the first failure.
    Pipeline {
        instance: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        check_tol: f64,
        #[arg(long, default_value_t = crate::extremal::DEFAULT_GRID)]
        grid: usize,
        #[command(flatten)]
        solve: SolveArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
}

/// Input problems exit with 2, everything else that goes wrong with 3.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_) | Error::Dimension(_) | Error::Io(_) | Error::Json(_) | Error::NotDiagonal | Error::TooLarge { .. } => EXIT_INPUT,
        _ => EXIT_FAILURE,
    }
}

pub fn run(cli: Cli) -> i32 {
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
