//! `smf`: command-line driver for the try-on toolkit.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, bad config,
//! out-of-range indices, unknown prompt words), 2 for runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{usage, CliError};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "smf", version, about = "Mask-free text-instructed virtual try-on at desk scale")]
struct Cli {
    /// Run config file (flat `key = value` lines); defaults apply if omitted
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the config's run seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Directory for artifacts the command writes
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Checkpoint to resume from (train) or to load (sample, eval)
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,

    /// Override the config's training step budget
    #[arg(long, global = true, value_name = "N")]
    steps: Option<u64>,

    /// Override the garment prompt (sample only)
    #[arg(long, global = true, value_name = "TEXT")]
    prompt: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training set, eval set, and eval pairing list
    Datagen,
    /// Train a velocity model with CSV logging and periodic checkpoints
    Train,
    /// Generate one try-on image and a person|garment|result strip
    Sample {
        /// Person triplet index in the eval dataset
        #[arg(long, value_name = "N")]
        person: usize,
        /// Garment triplet index in the eval dataset
        #[arg(long, value_name = "N")]
        garment: usize,
    },
    /// Score a checkpoint on the eval pairing and write a report
    Eval,
    /// Train baseline, +ref-pos, and +ref-pos+attn variants and tabulate them
    Ablate,
    /// Finite-difference checks: all ops, reduced end-to-end, self-test
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = cli.steps {
        cfg.steps = steps;
        cfg.validate().map_err(usage)?;
    }
    let threads = commands::threads_from_env()?;

    match cli.command {
        Command::Datagen => commands::datagen::run(&cfg),
        Command::Train => commands::train::run(&cfg, &cli.out, cli.checkpoint.as_deref(), threads),
        Command::Sample { person, garment } => commands::sample::run(
            &cfg,
            &cli.out,
            cli.checkpoint.as_deref(),
            person,
            garment,
            cli.prompt.as_deref(),
        ),
        Command::Eval => commands::eval::run(&cfg, &cli.out, cli.checkpoint.as_deref()),
        Command::Ablate => commands::ablate::run(&cfg, &cli.out, threads),
        Command::Gradcheck => commands::gradcheck::run(),
    }
}
