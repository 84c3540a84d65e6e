//! `kgac`: train GNN teachers, amalgamate them into graph-free students,
//! evaluate and benchmark checkpoints.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or input paths. Exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// Failure while running. Exit code 1.
    #[error(transparent)]
    Runtime(#[from] kgac::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "kgac", version, about = "KAN-based GNN teachers and multi-teacher amalgamation into graph-free students")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Flat JSON config file with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Keep every node instead of the largest connected component.
    #[arg(long)]
    full_graph: bool,
    /// Feature transform: `stored` or `binary`. Checkpoint commands read
    /// it from the checkpoint instead.
    #[arg(long, default_value = "stored")]
    features: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the train/val/test split for one seed.
    Splits {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Train one architecture over every configured seed.
    TrainTeacher(ExperimentArgs),
    /// Amalgamate two teachers into a student over every configured seed.
    Distill(ExperimentArgs),
    /// Accuracy of a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Inference latency of a checkpoint.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = kgac::bench::MIN_REPS)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Splits { data, seed, out, json } => commands::splits(&data, seed, &out, json),
        Command::TrainTeacher(a) => commands::train_teacher(&config::ExperimentConfig::load(a.config.as_deref(), &a.overrides)?, a.json),
        Command::Distill(a) => commands::distill(&config::ExperimentConfig::load(a.config.as_deref(), &a.overrides)?, a.json),
        Command::Eval { checkpoint, dataset, split, out, json } => commands::eval(&checkpoint, &dataset, &split, out.as_deref(), json),
        Command::Bench { checkpoint, dataset, reps, out, json } => commands::bench(&checkpoint, &dataset, reps, out.as_deref(), json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kgac: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
