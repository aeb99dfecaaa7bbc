//! Experiment driver behind the `demoselect` binary.
//!
//! Every subcommand returns the text it would print; files go to `--out`.
//! Errors carry the process exit code: 1 for runtime failures, 2 for
//! usage and configuration problems.

use std::fmt;

use clap::{Parser, Subcommand};
use serde::Serialize;

pub mod commands;
pub mod config;

pub use commands::{cmd_analyze, cmd_compare, cmd_evaluate, cmd_sweep, cmd_synth, cmd_train};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            kind,
            message: message.into(),
        }
    }

    pub fn runtime(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            kind,
            message: message.into(),
        }
    }

    /// Single-line JSON, suitable for log scraping.
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("plain struct serializes");
        line.retain(|c| c != '\n');
        line
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<demoselect::Error> for CliError {
    fn from(e: demoselect::Error) -> Self {
        use demoselect::Error as E;
        let (code, kind) = match &e {
            E::Timeout { .. } => (1, "timeout"),
            E::Transport { .. } => (1, "transport"),
            E::EmptyCompletion => (1, "empty_completion"),
            E::TooManyFailures { .. } => (1, "generator"),
            E::InconsistentState(_) => (1, "internal"),
            E::Io { .. } => (2, "io"),
            E::Record { .. } | E::Json(_) => (2, "format"),
            E::DuplicateId { .. } => (2, "duplicate_id"),
            E::MissingEmbedding(_) | E::DimMismatch { .. } | E::InvalidVector { .. } => (2, "embedding"),
            E::TooFewCandidates { .. } => (2, "too_few_candidates"),
            E::UnknownCase(_) => (2, "unknown_case"),
            E::MissingField { .. } => (2, "missing_field"),
            E::InvalidArgument(_) => (2, "invalid_argument"),
        };
        CliError {
            code,
            kind,
            message: e.to_string().replace('\n', " "),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "demoselect", version, about = "Demonstration selection for in-context utterance rewriting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus.
    Synth(commands::SynthCmd),
    /// Train the selection policy.
    Train(commands::TrainCmd),
    /// Evaluate one selector.
    Evaluate(commands::EvaluateCmd),
    /// Evaluate several selectors on the same cases.
    Compare(commands::CompareCmd),
    /// Train and evaluate across shots, candidate-pool or training-set sizes.
    Sweep(commands::SweepCmd),
    /// Complexity statistics of the examples each selector picks.
    Analyze(commands::AnalyzeCmd),
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::Train(c) => cmd_train(c),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::Compare(c) => cmd_compare(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Analyze(c) => cmd_analyze(c),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_args<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::usage("usage", e.to_string().trim().replace('\n', " ")))?;
    run(&cli)
}
