//! `facmix` command-line front end: simulation, fitting, stability scoring
//! and fit summaries with reproducible, manifest-stamped outputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod manifest;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }
    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: EXIT_DATA, message: message.into() }
    }
    pub fn numeric(message: impl Into<String>) -> Self {
        CliError { code: EXIT_NUMERIC, message: message.into() }
    }
}

impl From<facmix::Error> for CliError {
    fn from(e: facmix::Error) -> Self {
        use facmix::Error::*;
        let code = match &e {
            Config(_) => EXIT_USAGE,
            Parse(_) | Dimension(_) | Degenerate(_) | Io(_) => EXIT_DATA,
            Domain(_) | Singular(_) => EXIT_NUMERIC,
        };
        CliError { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(
    name = "facmix",
    version,
    about = "Sparse/dense mixture factor analysis with three-parameter-beta shrinkage"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate benchmark data sets with known factors
    Simulate(commands::simulate::SimulateArgs),
    /// Fit the factor model to a data matrix (EM or Gibbs)
    Fit(commands::fit::FitArgs),
    /// Compare two loading matrices with the stability statistics
    Stability(commands::stability::StabilityArgs),
    /// Summarize a fit directory into plot-ready tables
    Summarize(commands::summarize::SummarizeArgs),
}

/// Worker count: the flag wins, then FACMIX_THREADS, then 1 (the
/// single-thread default keeps outputs bitwise deterministic).
pub fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var("FACMIX_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1)
        .max(1)
}

/// Run `job(i)` for `i in 0..count` on up to `threads` workers. Jobs own
/// disjoint output paths, so scheduling cannot affect the results.
pub fn parallel_for<F>(count: usize, threads: usize, job: F) -> Result<(), CliError>
where
    F: Fn(usize) -> Result<(), CliError> + Sync,
{
    if threads <= 1 || count <= 1 {
        for i in 0..count {
            job(i)?;
        }
        return Ok(());
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let failures = std::sync::Mutex::new(Vec::<CliError>::new());
    std::thread::scope(|scope| {
        for _ in 0..threads.min(count) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= count {
                    break;
                }
                if let Err(e) = job(i) {
                    failures.lock().unwrap().push(e);
                    break;
                }
            });
        }
    });
    match failures.into_inner().unwrap().pop() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => commands::simulate::run(&args),
        Command::Fit(args) => commands::fit::run(&args),
        Command::Stability(args) => commands::stability::run(&args),
        Command::Summarize(args) => commands::summarize::run(&args),
    };
    if let Err(e) = result {
        eprintln!("facmix: {}", e.message);
        std::process::exit(e.code);
    }
}
