//! `oodd`: streaming test-time OOD detection from precomputed features.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;
mod report;

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "oodd", version, about = "Streaming OOD detection with static ID and dynamic OOD dictionaries")]
struct Cli {
    /// Root directory for every file the command writes.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "OODD_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the ID dictionary from a crop store.
    BuildIdDict(commands::BuildIdDictArgs),
    /// Generate outlier keys for dictionary initialization.
    GenOutliers(commands::GenOutliersArgs),
    /// Score queries against fixed ID and OOD key sets.
    Score(commands::ScoreArgs),
    /// Run a labeled stream through the detector.
    Run(RunCommand),
    /// Compute detection metrics from a trace CSV.
    Eval(commands::EvalArgs),
    /// Time the cosine path against the explicit Euclidean path.
    Bench(commands::BenchArgs),
    /// Run a stream and write the final OOD dictionary.
    DumpDict(RunCommand),
    /// Write a synthetic dataset and a matching run configuration.
    Synth(commands::SynthArgs),
}

#[derive(Debug, Args)]
struct RunCommand {
    #[command(flatten)]
    run: config::RunArgs,
}

fn install_threads(threads: Option<usize>) -> Result<(), CliError> {
    match threads {
        Some(0) => Err(CliError::new("threads", "thread count must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new("threads", e)),
        None => Ok(()),
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    install_threads(cli.threads)?;
    let out = output::OutDir::new(cli.out_dir);
    match cli.command {
        Command::BuildIdDict(a) => commands::build_id_dict(&a, &out),
        Command::GenOutliers(a) => commands::gen_outliers(&a, &out),
        Command::Score(a) => commands::score(&a, &out),
        Command::Run(a) => commands::run(&a.run, &out),
        Command::Eval(a) => commands::eval(&a, &out),
        Command::Bench(a) => commands::bench(&a, &out),
        Command::DumpDict(a) => commands::dump_dict(&a.run, &out),
        Command::Synth(a) => commands::synth(&a, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
