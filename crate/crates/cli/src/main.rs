//! `taskprompt`: build prompts, query the model, decode iteratively, parse
//! responses, run sweeps, rate responses and serve the HTTP API.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use taskprompt::prompt::{FeatureScope, Style};
use taskprompt::scene::ContextScope;

#[derive(Debug, Parser)]
#[command(name = "taskprompt", version, about, arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the prompt for one scene object.
    BuildPrompt {
        #[command(flatten)]
        prompt: PromptArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Run one batch completion for a prompt.
    Complete {
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        /// Responses to request; defaults to 3 when sampling, else 1.
        #[arg(long)]
        n: Option<u32>,
        #[arg(long, default_value_t = 128)]
        max_tokens: u32,
        #[command(flatten)]
        common: Common,
    },
    /// Decode step by step, forcing known first words.
    Decode {
        #[command(flatten)]
        prompt: PromptArgs,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value_t = 0.10)]
        known_threshold: f64,
        #[arg(long, default_value_t = 0.60)]
        fallback_threshold: f64,
        #[arg(long, default_value_t = 3)]
        max_branches: usize,
        #[arg(long, default_value_t = 10)]
        max_steps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Parse a response file into steps, or a goal sentence.
    Parse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        grammar: Option<PathBuf>,
        /// Ground noun phrases against this scene.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Treat the input as a goal sentence.
        #[arg(long)]
        goal: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run a sweep and write the aggregated report as CSV (JSON rows with `--json`).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Report destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Append new response records here and read ratings from it.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// `auto` or `human`.
        #[arg(long, default_value = "auto")]
        mode: String,
        #[command(flatten)]
        common: Common,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value = ".taskprompt/data")]
        data_dir: PathBuf,
        #[arg(long)]
        library: Option<PathBuf>,
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Sweep configs whose gold standards back automatic reports.
        #[arg(long)]
        gold_from: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Rate pending responses at the terminal.
    Rate {
        #[arg(long, default_value = ".taskprompt/data")]
        data_dir: PathBuf,
        #[arg(long)]
        rater: String,
        #[arg(long)]
        experiment: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Answer only from the response cache; never call the backend.
    #[arg(long)]
    pub cache_only: bool,
    #[arg(long, default_value = ".taskprompt/cache")]
    pub cache_dir: PathBuf,
    /// `live`, `synthetic`, or `script:<file>`.
    #[arg(long, default_value = "live")]
    pub backend: String,
    /// TOML file overriding the backend environment variables.
    #[arg(long)]
    pub backend_config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PromptArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub object: usize,
    #[arg(long, default_value = "terse")]
    pub style: Style,
    #[arg(long, default_value_t = 1)]
    pub examples: usize,
    #[arg(long)]
    pub no_delimiters: bool,
    #[arg(long, default_value = "partial")]
    pub context: ContextScope,
    #[arg(long, default_value = "full")]
    pub features: FeatureScope,
    #[arg(long)]
    pub elicit_goal: bool,
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Steps already written after `Steps:`.
    #[arg(long = "step")]
    pub steps: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            ExitCode::from(1)
        }
    }
}
