//! Command-line driver: one subcommand per pipeline stage, each reading the
//! previous stage's files from the run directory and writing its own.

pub mod checkpoint;
pub mod config;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dstgen::jsonl::JsonlError;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub use config::{BackendKind, EmbedderKind, PipelineConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnitFailure {
    pub unit: String,
    pub error: String,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{stage}: missing input {path}")]
    MissingInput { stage: &'static str, path: String },
    #[error("malformed input: {0}")]
    Input(String),
    #[error("{stage}: {} unit(s) failed", failures.len())]
    Units {
        stage: &'static str,
        failures: Vec<UnitFailure>,
    },
    #[error("{stage}: {message}")]
    Failed { stage: &'static str, message: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<JsonlError> for CliError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { .. } => CliError::Io(e.to_string()),
            JsonlError::Schema { .. } => CliError::Input(e.to_string()),
        }
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config_error",
            CliError::MissingInput { .. } => "missing_input",
            CliError::Input(_) => "malformed_input",
            CliError::Units { .. } => "unit_failures",
            CliError::Failed { .. } => "stage_failed",
            CliError::Io(_) => "io_error",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput { .. } => 3,
            CliError::Input(_) => 4,
            _ => 1,
        }
    }

    /// Machine-readable error summary.
    pub fn summary(&self) -> serde_json::Value {
        let mut out = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            CliError::MissingInput { stage, path } => {
                out["stage"] = json!(stage);
                out["path"] = json!(path);
            }
            CliError::Units { stage, failures } => {
                out["stage"] = json!(stage);
                out["failures"] = json!(failures);
            }
            CliError::Failed { stage, .. } => out["stage"] = json!(stage),
            _ => {}
        }
        out
    }
}

#[derive(Debug, Parser)]
#[command(name = "dstgen", version, about = "Generate and evaluate synthetic dialogue state tracking data")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Redo units that already have output.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true)]
    pub backend: Option<BackendKind>,
    /// Model tag for one template, e.g. `qa_pairs=gpt-4`. Repeatable.
    #[arg(long = "stage-model", value_name = "STAGE=TAG", global = true)]
    pub stage_model: Vec<String>,
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub fixtures_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Derive deduplicated scenarios.
    Scenarios,
    /// Information types and dialogues per scenario.
    Dialogues,
    /// Turn-level state updates per dialogue.
    Annotate,
    /// Slot specifications per update.
    Describe,
    /// Downsampled training set and corpus statistics.
    Assemble,
    /// Attach in-context demonstrations to the training set.
    Augment {
        /// JSONL of `{slot, turn_text, value}` overriding mined demonstrations.
        #[arg(long)]
        manual_demos: Option<PathBuf>,
    },
    /// Print corpus statistics.
    Stats,
    /// Leave-one-domain-out joint goal accuracy.
    Evaluate {
        /// Benchmark dialogues in the interchange JSONL format.
        #[arg(long, conflicts_with = "multiwoz", required_unless_present = "multiwoz")]
        benchmark: Option<PathBuf>,
        /// MultiWOZ-style data.json.
        #[arg(long)]
        multiwoz: Option<PathBuf>,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
        /// Two-column TSV of value aliases.
        #[arg(long)]
        aliases: Option<PathBuf>,
        /// Defaults to report.tsv in the run directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write model input sequences for a dataset file.
    Render {
        /// Defaults to the augmented dataset if present.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

/// Config file, then `DSTGEN_*` variables, then flags.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    if let Some(backend) = cli.backend {
        config.backend = backend;
    }
    if let Some(dir) = &cli.run_dir {
        config.run_dir = dir.clone();
    }
    if let Some(dir) = &cli.fixtures_dir {
        config.fixtures_dir = Some(dir.clone());
    }
    for spec in &cli.stage_model {
        let (stage, tag) = spec
            .split_once('=')
            .filter(|(s, t)| !s.trim().is_empty() && !t.trim().is_empty())
            .ok_or_else(|| CliError::Config(format!("--stage-model expects STAGE=TAG, got {spec:?}")))?;
        config.stage_models.insert(stage.trim().to_string(), tag.trim().to_string());
    }
    config.validate()?;
    Ok(config)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let config = resolve_config(cli)?;
    let ctx = stages::Context::new(config, cli.force);
    match &cli.command {
        Command::Scenarios => stages::scenarios(&ctx),
        Command::Dialogues => stages::dialogues(&ctx),
        Command::Annotate => stages::annotate(&ctx),
        Command::Describe => stages::describe(&ctx),
        Command::Assemble => stages::assemble(&ctx),
        Command::Augment { manual_demos } => stages::augment(&ctx, manual_demos.as_deref()),
        Command::Stats => {
            print!("{}", stages::stats(&ctx)?);
            Ok(())
        }
        Command::Evaluate {
            benchmark,
            multiwoz,
            predictions,
            domains,
            aliases,
            output,
        } => {
            let source = match (benchmark, multiwoz) {
                (Some(p), _) => stages::BenchmarkSource::Interchange(p.clone()),
                (None, Some(p)) => stages::BenchmarkSource::MultiWoz(p.clone()),
                (None, None) => return Err(CliError::Config("evaluate needs --benchmark or --multiwoz".into())),
            };
            let report = stages::evaluate(&ctx, &source, predictions, domains, aliases.as_deref(), output.as_deref())?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Render { input } => stages::render(&ctx, input.as_deref()),
        Command::ShowConfig => {
            print!("{}", ctx.config.to_toml());
            Ok(())
        }
    }
}
