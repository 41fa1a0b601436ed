use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::SearchFlags;

#[derive(Parser)]
#[command(name = "rlprune", version, about = "RL-guided structured channel pruning")]
struct Cli {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for candidate sampling.
    #[arg(long, global = true, env = "RLPRUNE_THREADS")]
    threads: Option<usize>,
    #[command(flatten)]
    search: SearchFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural-shapes dataset (train, reward and test splits).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 3000)]
        train: usize,
        /// Size of the split used for search rewards.
        #[arg(long, default_value_t = 500)]
        reward_split: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
    },
    /// Train a dense model; a checkpoint is written after every epoch.
    Train {
        /// Fixture architecture (vgg-mini, res-mini, incep-mini, se-mini, vgg19, resnet56).
        #[arg(long, conflicts_with = "init")]
        arch: Option<String>,
        /// Continue from an existing model instead.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Print the dependency graph and coupled groups of a model.
    Trace {
        model: PathBuf,
        /// Emit the structured report as JSON instead of lines.
        #[arg(long)]
        json: bool,
    },
    /// Search a sparsity distribution and prune.
    Prune {
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Spread every step's budget in proportion to live channels instead of searching.
        #[arg(long)]
        uniform: bool,
    },
    /// Per-group error increase after pruning a fraction of its channels.
    Sensitivity {
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        /// Uniformly pre-prune this fraction of channels before the sweep.
        #[arg(long, default_value_t = 0.0)]
        pre_prune: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy, FLOPs and parameters of a model on the test split.
    Eval {
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report compression ratios against this model.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Also write the metrics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a history CSV into plot series, or dump Taylor scores.
    Report {
        history: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dump per-channel Taylor scores of this model instead.
        #[arg(long, requires = "data")]
        scores: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
