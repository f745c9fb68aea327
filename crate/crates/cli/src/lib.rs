//! `lbsplat`: generate synthetic bodies, train articulated surfel models,
//! render and evaluate them, and verify the gradients.

pub mod check;
pub mod config;
pub mod eval;
pub mod gen;
pub mod render;
pub mod train;

use clap::{Parser, Subcommand};
use lbsplat_core::Error as CoreError;

pub use config::RunConfig;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Failures that originate in the driver itself rather than the library.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    CheckFailed(String),
}

#[derive(Debug, Parser)]
#[command(name = "lbsplat", version, about = "Articulated 2D Gaussian surfels: train, render, evaluate")]
pub struct Cli {
    /// Rasterizer worker threads [default: $LBSPLAT_THREADS, else all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic articulated body scene.
    Gen(gen::GenArgs),
    /// Fit a model to a scene.
    Train(train::TrainArgs),
    /// Render one view from a checkpoint.
    Render(render::RenderArgs),
    /// PSNR/SSIM table on the held-out cameras.
    Eval(eval::EvalArgs),
    /// Finite-difference gradient check and rasterizer oracle comparison.
    Check(check::CheckArgs),
}

pub const THREADS_ENV: &str = "LBSPLAT_THREADS";

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train::run(&a, cli.threads),
        Command::Gen(a) => with_threads(cli.threads, || gen::run(&a)),
        Command::Render(a) => with_threads(cli.threads, || render::run(&a)),
        Command::Eval(a) => with_threads(cli.threads, || eval::run(&a)),
        Command::Check(a) => with_threads(cli.threads, || check::run(&a)),
    }
}

/// Run `f` on a pool of `threads` workers, falling back to the environment
/// default and then to one worker per core.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> anyhow::Result<T> + Send) -> anyhow::Result<T> {
    let threads = match threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v} is not a thread count")))?),
            Err(_) => None,
        },
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("thread count must be at least 1".into()).into());
        }
        pool = pool.num_threads(n);
    }
    pool.build()?.install(f)
}

/// Process exit status for an error: 1 usage, 2 data, 3 numerical.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::CheckFailed(_) => EXIT_NUMERICAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::InvalidParameter(_) => EXIT_USAGE,
                e if e.is_numerical() => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}
