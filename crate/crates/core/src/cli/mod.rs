//! The `emr` command-line tool.
//!
//! Exit codes: 0 success, 2 invalid arguments or configuration (including an
//! unknown task label), 3 misaligned checkpoints, 4 I/O or file-format
//! errors, 5 bundle/base fingerprint mismatch.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{Comparison, ReportFormat};
use crate::baselines::{Method, TrimGranularity};
use crate::checkpoint::ComputeDType;
use crate::error::{Error, Result};

pub use config::JobConfig;

/// Environment variable consulted for the worker thread count.
pub const THREADS_ENV: &str = "EMR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "emr", version, about = "Merge finetuned checkpoints with elect, mask and rescale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge finetuned models into a bundle (emr) or a single checkpoint.
    Merge(MergeArgs),
    /// Rebuild one task's model from a bundle and the base checkpoint.
    Apply(ApplyArgs),
    /// Report weight-space metrics of a merged model or bundle.
    Analyze(AnalyzeArgs),
    /// Summarise a bundle: tasks, mask densities, rescalers and sizes.
    Inspect(InspectArgs),
}

#[derive(Debug, Default, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    pub models: Vec<PathBuf>,
    /// Fisher weights, one file per model in the same order.
    #[arg(long, num_args = 1..)]
    pub fishers: Vec<PathBuf>,
    /// Gram matrices, one file per model in the same order.
    #[arg(long, num_args = 1..)]
    pub grams: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<ReportFormat>,
    /// Task-vector coefficient (task_arithmetic, ties).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Ties keep fraction in (0, 1].
    #[arg(long)]
    pub keep: Option<f64>,
    #[arg(long)]
    pub ties_granularity: Option<TrimGranularity>,
    /// DARE drop probability in [0, 1); enables DARE preprocessing.
    #[arg(long)]
    pub dare_p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// RegMean off-diagonal multiplier in (0, 1].
    #[arg(long)]
    pub regmean_a: Option<f64>,
    #[arg(long)]
    pub compute_dtype: Option<ComputeDType>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// JSON job file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Give every tensor its own rescaler (emr).
    #[arg(long)]
    pub per_tensor_rescaler: bool,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Proceed even if the base does not match the bundle's fingerprint.
    #[arg(long)]
    pub no_fingerprint_check: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long, conflicts_with = "bundle", required_unless_present = "bundle")]
    pub merged: Option<PathBuf>,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Output path; the report goes to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    pub format: ReportFormat,
    /// Compare task vectors (default) or raw weights.
    #[arg(long, default_value = "task-vectors")]
    pub compare: Comparison,
    #[arg(long)]
    pub compute_dtype: Option<ComputeDType>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Print a JSON document instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Merge(args) => commands::merge(args),
        Command::Apply(args) => {
            let threads = thread_count(args.threads, None)?;
            in_pool(threads, || commands::apply(args))
        }
        Command::Analyze(args) => {
            let threads = thread_count(args.threads, None)?;
            in_pool(threads, || commands::analyze(args))
        }
        Command::Inspect(args) => commands::inspect(args),
    }
}

/// Flag, then `EMR_THREADS`, then the job file; `None` means one thread per
/// core.
pub(crate) fn thread_count(flag: Option<usize>, config: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return check_threads(n).map(Some);
    }
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let n: usize = value.trim().parse().map_err(|_| {
            Error::config(format!("{THREADS_ENV} must be a positive integer, got `{value}`"))
        })?;
        return check_threads(n).map(Some);
    }
    config.map(check_threads).transpose()
}

fn check_threads(n: usize) -> Result<usize> {
    if n == 0 {
        Err(Error::config("thread count must be at least 1"))
    } else {
        Ok(n)
    }
}

pub(crate) fn in_pool<T: Send>(
    threads: Option<usize>,
    job: impl FnOnce() -> Result<T> + Send,
) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config(format!("cannot start thread pool: {e}")))?;
    pool.install(job)
}
