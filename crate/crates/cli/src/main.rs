//! `dkn`: generate corpora, distill graphs, train embeddings and click models,
//! evaluate, export attention and run ablations.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

mod commands;
mod inputs;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "dkn", version, about = "Knowledge-aware news click-through-rate modelling")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with settings; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus: logs.jsonl, triples.tsv, manifest.json.
    Gen(commands::GenArgs),
    /// Extract the sub-graph around the entities mentioned in a click log.
    Distill(commands::DistillArgs),
    /// Train translation-based graph embeddings.
    TrainKge(commands::TrainKgeArgs),
    /// Train the click model and write a checkpoint with its metrics.
    TrainDkn(commands::TrainDknArgs),
    /// Score a click log with a checkpoint.
    Eval(commands::EvalArgs),
    /// Attention weights of one user's clicks against candidate titles.
    ExportAttention(commands::ExportAttentionArgs),
    /// Train the variant grid over several seeds and compare.
    Ablate(commands::AblateArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DKN_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&cli.global, a),
        Command::Distill(a) => commands::distill(&cli.global, a),
        Command::TrainKge(a) => commands::train_kge(&cli.global, a),
        Command::TrainDkn(a) => commands::train_dkn(&cli.global, a),
        Command::Eval(a) => commands::eval(&cli.global, a),
        Command::ExportAttention(a) => commands::export_attention(&cli.global, a),
        Command::Ablate(a) => commands::ablate(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
