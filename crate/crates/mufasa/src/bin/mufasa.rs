use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mufasa::cli;
use mufasa::config::{Overrides, RunConfig};
use mufasa::model::Variant;

#[derive(Parser)]
#[command(
    name = "mufasa",
    version,
    about = "Multimodal-fusion, sparse-attention sequential recommender"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for generated files, checkpoints, and reports.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Item file (line-delimited records).
    #[arg(long, global = true, value_name = "PATH")]
    data_items: Option<PathBuf>,

    /// Interaction file (line-delimited records).
    #[arg(long, global = true, value_name = "PATH")]
    data_interactions: Option<PathBuf>,

    /// Model variant: full, no-mfl, no-sal, full-attention.
    #[arg(long, global = true, value_name = "NAME")]
    variant: Option<String>,

    /// Checkpoint path for train/eval.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and fit cf embeddings.
    GenData,
    /// Run the two-stage training pipeline.
    Train,
    /// Evaluate a checkpoint under the configured protocol.
    Eval,
    /// Train and compare all ablation variants.
    Ablate,
    /// Verify every gradient against finite differences.
    Gradcheck,
    /// Sweep sequence lengths and report attention costs.
    Bench,
}

fn run() -> mufasa::Result<String> {
    let args = Cli::parse();
    let variant = match &args.variant {
        Some(s) => Some(s.parse::<Variant>()?),
        None => None,
    };
    let overrides = Overrides {
        seed: args.seed,
        out_dir: args.out,
        data_items: args.data_items,
        data_interactions: args.data_interactions,
        checkpoint: args.checkpoint,
        variant,
    };
    let cfg = RunConfig::load(args.config.as_deref(), &overrides)?;
    match args.command {
        Command::GenData => cli::cmd_gen_data(&cfg),
        Command::Train => cli::cmd_train(&cfg),
        Command::Eval => cli::cmd_eval(&cfg),
        Command::Ablate => cli::cmd_ablate(&cfg),
        Command::Gradcheck => cli::cmd_gradcheck(&cfg),
        Command::Bench => cli::cmd_bench(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(output) => {
            cli::emit(&output);
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
