use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

mod commands;
mod config;

/// Exit code 2 for usage and configuration problems, 1 for everything
/// that fails after the run has started.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(stylex::Error),
}

impl From<stylex::Error> for CliError {
    fn from(e: stylex::Error) -> Self {
        match e {
            stylex::Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stylex", version, about = "Style classification with word-level stylistic explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand. Flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; also settable through STYLEX_OUTPUT_DIR.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Built-in style name.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed_corpus: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub pseudo_corpus: Option<PathBuf>,
    #[arg(long)]
    pub test_corpus: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainerArgs {
    /// stylex, integrated_gradients, random or oracle.
    #[arg(long)]
    pub explainer: Option<String>,
    #[arg(long)]
    pub k_fraction: Option<f64>,
    #[arg(long)]
    pub ig_steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the seed word scorer on human-annotated sentences.
    TrainSeed(Common),
    /// Score unannotated sentences with a trained seed scorer.
    PseudoLabel(Common),
    /// Train the joint model on seed plus pseudo-labeled sentences.
    TrainJoint(Common),
    /// Write word and sentence explanations for a corpus.
    Explain(Common),
    /// Integrated-gradients attributions for a corpus.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// Target sentence label; defaults to the positive label.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Sentence-level F1 of a checkpoint on the test corpus.
    EvalF1(Common),
    /// Train a classifier on top-k extracted words and report its F1.
    EvalSufficiency {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        explainer: ExplainerArgs,
    },
    /// Pearson correlation with human word scores.
    EvalPlausibility {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        explainer: ExplainerArgs,
    },
    /// Share of positive sentences whose top-k words hit the lexicon.
    EvalOverlap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        explainer: ExplainerArgs,
    },
    /// Anonymized A/B highlight pairs plus a separate key file.
    ExportPairs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Static HTML page with human, model and baseline highlights.
    RenderHtml {
        #[command(flatten)]
        common: Common,
        /// Add an integrated-gradients row per sentence.
        #[arg(long)]
        with_baseline: bool,
    },
    /// Write a planted-cue synthetic corpus.
    MakeSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 500)]
        test_n: usize,
        /// Leading sentences kept with human scores as the seed corpus.
        #[arg(long, default_value_t = 400)]
        seed_size: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            if e.kind() == ErrorKind::InvalidSubcommand {
                let _ = Cli::command().print_help();
                println!();
            }
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(1),
            }
        }
    }
}
