//! Command-line driver for the cross-lingual reranking pipeline.

mod commands;
mod config;
mod meta;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use config::ExperimentConfig;

/// Misuse of the command line or the configuration. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "mart", version, about = "Translation-aware cross-lingual reranking")]
struct Cli {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.lr=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Reranker variant: mart, placebo or vanilla.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated, 1-based layer indices.
    #[arg(long, global = true)]
    mat_layers: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cross-lingual collection.
    Synth,
    /// Normalize text and train the subword vocabulary.
    Prep,
    /// Build a translation table from parallel text, a dictionary or embeddings.
    Table,
    /// Build the BM25 index over the document collection.
    Index,
    /// First-stage retrieval with translated queries.
    Retrieve,
    /// Fine-tune a reranker and rerank the test fold.
    Train {
        /// Write the translation attention matrix of one training input.
        #[arg(long)]
        dump_mtr: bool,
    },
    /// Score runs and compare them with paired t-tests.
    Eval {
        /// `name=path` of a TREC run file; repeatable.
        #[arg(long = "run", value_name = "NAME=PATH")]
        runs: Vec<String>,
    },
    /// Per-layer similarity between translation pairs and random pairs.
    Analyze,
    /// Train over several MAT layer settings and tabulate the results.
    Ablate,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut sets = cli.sets.clone();
    if let Some(m) = &cli.mode {
        sets.push(format!("mode={m}"));
    }
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(l) = &cli.mat_layers {
        sets.push(format!("mat_layers={l}"));
    }
    if let Some(o) = &cli.out {
        sets.push(format!("out={}", o.display()));
    }
    ExperimentConfig::load(cli.config.as_deref(), &sets)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Prep => commands::prep(&cfg),
        Command::Table => commands::table(&cfg),
        Command::Index => commands::index(&cfg),
        Command::Retrieve => commands::retrieve(&cfg),
        Command::Train { dump_mtr } => commands::train(&cfg, *dump_mtr),
        Command::Eval { runs } => commands::eval(&cfg, runs),
        Command::Analyze => commands::analyze(&cfg),
        Command::Ablate => commands::ablate(&cfg),
    }
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<mart_core::Error>(),
                Some(mart_core::Error::Config(_) | mart_core::Error::Parse { .. })
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MART_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
