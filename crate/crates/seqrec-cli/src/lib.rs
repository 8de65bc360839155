//! Command-line front end for the recommender pipeline: six subcommands
//! that turn one TOML config into reproducible artifacts on disk.

pub mod config;
pub mod manifest;

mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use seqrec::error::Error;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "seqrec",
    version,
    about = "Sequential recommender pipeline: synth | pairs | sft | train | eval | bench"
)]
pub struct Cli {
    /// Run configuration (TOML). Omitted: built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Replace the run seed (data, initialization, shuffling, dropout).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory anchoring all relative artifact paths.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override one config entry by dotted key, e.g. --set model.latent_dim=48.
    /// Repeatable; values parse as TOML literals and fall back to strings.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic catalog, interaction log, and cluster labels.
    Synth,
    /// Select semantically similar item pairs for content fine-tuning.
    Pairs,
    /// Fine-tune the content heads and write the aligned feature tables.
    Sft,
    /// Train the recommender (a single phase, or a whole strategy).
    Train {
        /// Run one phase: 1 (ID pretraining), 2 (content post-training on
        /// the stage-1 checkpoint), or end2end.
        #[arg(long)]
        stage: Option<String>,
        /// Run a schedule from scratch: two-step, fixed-conenc,
        /// fixed-conemb, or end2end. Defaults to the config's strategy.
        #[arg(long, conflicts_with = "stage")]
        strategy: Option<String>,
    },
    /// Rank held-out targets and report Hit@K / NDCG@K.
    Eval {
        /// Which held-out target to score.
        #[arg(long, default_value = "valid")]
        split: String,
        /// Checkpoint to evaluate; defaults to the most advanced one found.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Measure forward-pass latency and its growth with sequence length.
    Bench {
        /// Checkpoint to benchmark; defaults to the most advanced one found.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
}

/// Exit codes promised to scripts: 0 success, 2 configuration problems,
/// 3 missing or malformed data, 4 numeric divergence.
fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    let config = RunConfig::load(
        cli.config.as_deref(),
        &cli.set,
        cli.seed,
        cli.out.as_deref(),
    )?;
    match &cli.command {
        Command::Synth => commands::cmd_synth(&config),
        Command::Pairs => commands::cmd_pairs(&config),
        Command::Sft => commands::cmd_sft(&config),
        Command::Train { stage, strategy } => {
            commands::cmd_train(&config, stage.as_deref(), strategy.as_deref())
        }
        Command::Eval { split, checkpoint } => {
            commands::cmd_eval(&config, split, checkpoint.as_deref())
        }
        Command::Bench { checkpoint } => commands::cmd_bench(&config, checkpoint.as_deref()),
    }
}

/// Parse arguments, run the chosen command, and translate errors into the
/// documented exit codes. Clap itself exits 2 on malformed arguments.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(error) => {
            eprintln!("error: {error}");
            exit_code(&error)
        }
    }
}
