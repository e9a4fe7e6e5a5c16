//! `fedmix`: seeded experiments on federated diffusion over Gaussian mixtures.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "fedmix", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct CommonArgs {
    /// TOML config, or a previous run's manifest.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to runs/<command>-<timestamp>-seed<seed>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write each client's dataset and a manifest.
    GenData(CommonArgs),
    /// Collaborative pre-training; writes metrics.csv and params.json.
    Pretrain(CommonArgs),
    /// Fit a new client's embedding against a frozen backbone.
    Finetune(CommonArgs),
    /// Reverse-SDE samples from a true or estimated score.
    Sample(CommonArgs),
    /// Run the verification suite; exits 1 if any check fails.
    Verify(CommonArgs),
    /// Robustness, bound or scaling sweep tables.
    Sweep(CommonArgs),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(fedmix_core::Error),
    ChecksFailed,
}

impl CliError {
    pub fn config(e: fedmix_core::Error) -> Self {
        CliError::Usage(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        use fedmix_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::ChecksFailed => 1,
            CliError::Run(e) => match e {
                E::NonFinite { .. } | E::SamplerDiverged { .. } => 1,
                _ => 2,
            },
        }
    }
}

impl From<fedmix_core::Error> for CliError {
    fn from(e: fedmix_core::Error) -> Self {
        CliError::Run(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::ChecksFailed => write!(f, "one or more checks failed"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
