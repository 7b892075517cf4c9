//! `eegcond`: synthesize or convert data, preprocess, train, evaluate,
//! ablate, analyse embeddings and write a report. Exit code 0 on success,
//! 1 on a runtime failure, 2 on a configuration or validation failure.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eegcond::models::Backbone;

use config::Overrides;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<eegcond::Error> for CliError {
    fn from(e: eegcond::Error) -> Self {
        if e.is_validation() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "eegcond",
    version,
    about = "Subject-conditioned EEG target/distractor decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<Backbone>,
    #[arg(long, value_name = "BOOL")]
    use_ids: Option<bool>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset into `<out>/raw`.
    Synth(Common),
    /// Convert an exported WithMe tree (`dataset.withme`) into `<out>/raw`.
    Convert(Common),
    /// Run the signal chain into `<out>/preprocessed`.
    Preprocess(Common),
    /// Train one model into `<out>/models/<backbone>_<ids|base>`.
    Train(Common),
    /// Evaluate a trained model on the within- and unseen-subject test sets.
    Eval(Common),
    /// Train and score every backbone with and without IDs.
    Ablate(Common),
    /// t-SNE and cluster statistics of the trained subject embeddings.
    Embed(Common),
    /// Summarize every artifact present into `<out>/report.md`.
    Report(Common),
}

type Runner = fn(&config::RunConfig) -> Result<(), CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (run, common): (Runner, &Common) = match &cli.command {
        Command::Synth(c) => (commands::synth, c),
        Command::Convert(c) => (commands::convert, c),
        Command::Preprocess(c) => (commands::preprocess, c),
        Command::Train(c) => (commands::train, c),
        Command::Eval(c) => (commands::eval, c),
        Command::Ablate(c) => (commands::ablate, c),
        Command::Embed(c) => (commands::embed, c),
        Command::Report(c) => (report::run, c),
    };
    let flags = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        backbone: common.backbone,
        use_ids: common.use_ids,
    };
    let result = config::resolve(&common.config, std::env::vars(), &flags).and_then(|cfg| {
        commands::echo_config(&cfg)?;
        run(&cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
