use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genmatch::config::{run, Command, ExperimentConfig};
use genmatch::Error;

/// Generator matching experiments: residual checks, sampling, training and
/// toy benchmarks.
#[derive(Parser)]
#[command(name = "genmatch", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// KFE residual suite with negative controls.
    VerifyKfe(Flags),
    /// Sample the exact marginal model.
    Simulate(Flags),
    /// Train a network on the conditional loss and sample from it.
    Train(Flags),
    /// Path x model sweep on toy data.
    BenchToy(Flags),
}

#[derive(Args)]
struct Flags {
    /// JSON config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, flags) = match cli.cmd {
        Cmd::VerifyKfe(f) => (Command::VerifyKfe, f),
        Cmd::Simulate(f) => (Command::Simulate, f),
        Cmd::Train(f) => (Command::Train, f),
        Cmd::BenchToy(f) => (Command::BenchToy, f),
    };
    let mut cfg = match &flags.config {
        Some(p) => match ExperimentConfig::from_file(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        },
        None => ExperimentConfig::new(command),
    };
    if cfg.command != command {
        eprintln!("error: config is for {:?}, not {:?}", cfg.command, command);
        return ExitCode::from(EXIT_CONFIG);
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(o) = flags.out {
        cfg.out = o;
    }
    if let Some(k) = flags.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(&cfg) {
        Ok(o) => {
            for f in &o.files {
                println!("{}", f.display());
            }
            if o.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("verification failed");
                ExitCode::from(EXIT_VERIFY)
            }
        }
        Err(e @ (Error::Config(_) | Error::Json(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
