//! `bridgekit`: generate data, train, sample, evaluate and self-check
//! discrete bridge models.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::LevelFilter;

/// Worker threads are capped by this variable when it is set.
pub const THREADS_ENV: &str = "BRIDGEKIT_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "bridgekit",
    version,
    about = "Discrete Markov-bridge models for conditional sequence refinement"
)]
pub struct Cli {
    /// Root for run directories of commands whose --out is a file.
    #[arg(long, global = true, default_value = "runs")]
    pub runs: PathBuf,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic train/valid/test splits.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the split files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        valid: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Print the cosine schedule for a bridge length.
    Schedule {
        #[arg(long, default_value_t = 25)]
        steps: usize,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes a run directory under --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding train.jsonl and valid.jsonl.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cap on optimizer steps, overriding the config.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue the run in this directory from its last checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate sequences for every example of a data file.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Samples per example.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// stochastic or greedy-final.
        #[arg(long, default_value = "stochastic")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint; writes a JSON report, a CSV and a text table.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Config file whose [eval] section is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the exact self-checks; exits 1 if any fails.
    Verify {
        /// kernels, prop1, vlb or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and compare the variants of a preset.
    Ablate {
        /// loss-comparison, prior-freeze, conditioning-zeroinit or steps-sweep.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Existing data directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> bridgekit::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| bridgekit::Error::invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| bridgekit::Error::invalid(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    run::init_logging(if cli.quiet {
        LevelFilter::Warn
    } else {
        LevelFilter::Info
    });
    let result = configure_threads().and_then(|()| commands::dispatch(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
