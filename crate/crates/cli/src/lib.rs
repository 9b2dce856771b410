//! Experiment runner: `propspan <command>` over a workspace of stage
//! directories, each committed with a run manifest.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod workspace;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "propspan", version, about = "Propaganda span identification and technique classification")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set si.epochs=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "lower")]
pub enum Subtask {
    #[value(alias = "SI")]
    Si,
    #[value(alias = "TC")]
    Tc,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus with SI and TC labels and a config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Replace `out` if it already exists.
        #[arg(long)]
        force: bool,
    },
    /// Split the corpus and build the vocabulary and segment/sample caches.
    Prepare,
    /// Masked-LM pre-training with checkpoints along the way.
    Pretrain,
    /// Fine-tune the span identification model.
    TrainSi,
    /// Fine-tune the technique classifier (or a checkpoint ensemble).
    TrainTc {
        #[arg(long)]
        ensemble: bool,
    },
    /// Predict spans (si) or techniques for given spans (tc).
    Predict {
        #[arg(long, ignore_case = true)]
        subtask: Subtask,
        /// Use the checkpoint ensemble (tc only).
        #[arg(long)]
        ensemble: bool,
        /// Directory of article files; defaults to the dev split of the corpus.
        #[arg(long)]
        articles: Option<PathBuf>,
        /// Spans to classify (tc only); defaults to the dev gold spans.
        #[arg(long)]
        spans: Option<PathBuf>,
    },
    /// Score a prediction file against gold labels.
    Score {
        #[arg(long, ignore_case = true)]
        subtask: Subtask,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
    },
    /// Per-technique F1 and support table.
    Report {
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code: 0 on success, 1 on failure, 2 on bad usage.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{rendered}");
            } else {
                let _ = write!(err, "{rendered}");
            }
            return code;
        }
    };
    match commands::dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}
