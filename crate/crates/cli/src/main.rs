use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "iser", version, about = "Span-based joint entity and relation extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Train on `train_path`; writes checkpoint.json and loss_trace.json.
    Train,
    /// Score the checkpoint on `eval_path`; writes report.json and report.txt.
    Eval,
    /// Extract entities and relations from `eval_path`; writes predictions.json.
    Predict,
    /// Dump cross-attention weights for the first `attn_limit` sentences of `eval_path`.
    Attn,
    /// Sentence, entity and relation counts for the configured datasets.
    Stats,
}

/// Failure reported as `ERROR <code>: <message>`.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<iser_core::Error> for CliError {
    fn from(e: iser_core::Error) -> Self {
        use iser_core::Error as E;
        let code = match &e {
            E::Config(_) | E::InvalidArgument(_) => "CONFIG",
            E::Io { .. } => "IO",
            E::Load { .. } | E::Alignment { .. } | E::Json { .. } => "DATA",
            E::CheckpointVersion { .. } => "CHECKPOINT_VERSION",
            E::Checkpoint(_) => "CHECKPOINT",
            E::NonFiniteLoss(_) | E::NonFiniteGradient(_) | E::NonDeterministic { .. } => "NUMERIC",
            E::Shape { .. } => "INTERNAL",
        };
        Self::new(code, e.to_string())
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Train => commands::train(&config),
        Command::Eval => commands::eval(&config),
        Command::Predict => commands::predict(&config),
        Command::Attn => commands::attn(&config),
        Command::Stats => commands::stats(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.message.replace('\n', " ");
            eprintln!("ERROR {}: {line}", e.code);
            ExitCode::from(if e.code == "CONFIG" { 2 } else { 1 })
        }
    }
}
