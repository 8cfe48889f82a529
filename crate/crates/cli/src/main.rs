mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eran::trainer::TrainMode;

/// Explainable recommendation over attribute networks.
#[derive(Parser, Debug)]
#[command(name = "eran", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory holding the run's artifacts.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=20`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse, filter and split the raw data into a dataset manifest.
    Ingest,
    /// Build the co-purchase graph and per-attribute networks.
    Build,
    /// Train the model, writing checkpoints and the loss trace.
    Train {
        #[arg(long)]
        mode: Option<TrainMode>,
        /// Minimize the negated ranking loss (diagnostic).
        #[arg(long)]
        flip_rank_sign: bool,
    },
    /// Leave-one-out evaluation with sampled negatives.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Hold items out of training and rank users for each of them.
    Coldstart {
        /// Evaluate an existing checkpoint trained with items excluded.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Top-k items for a user, with explanations.
    Recommend {
        #[arg(long)]
        user: String,
        #[arg(long, short, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write item embeddings per attribute field and the user table.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate a planted-preference dataset with a matching config.
    Synth {
        #[arg(long, default_value_t = 40)]
        users: usize,
        #[arg(long, default_value_t = 30)]
        items: usize,
        #[arg(long, default_value_t = 3)]
        fields: usize,
        #[arg(long, default_value_t = 4)]
        values: usize,
        #[arg(long, default_value_t = 6)]
        min_history: usize,
        #[arg(long, default_value_t = 10)]
        max_history: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
