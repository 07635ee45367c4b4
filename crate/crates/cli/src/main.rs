//! `ewe`: world generation, training, generation and evaluation from the shell.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::GenFlags;

#[derive(Debug, Parser)]
#[command(name = "ewe", version, about = "Explicit working memory generation on a toy world")]
pub struct Cli {
    /// Directory holding worlds, checkpoints and reports.
    #[arg(long, global = true, env = "EWE_DATA_DIR", default_value = "ewe-data")]
    pub data_dir: PathBuf,
    /// Flat dotted-key JSON config applied over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set memory.k_r=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a toy world with its datastore, training corpus and prompts.
    World(WorldArgs),
    /// Validate a passage file and write it as the datastore index.
    Ingest(IngestArgs),
    /// Train the toy transformer on the world's corpus.
    Train(TrainArgs),
    /// Answer one prompt and write its event log.
    Generate(GenerateArgs),
    /// Benchmark the configured systems.
    Eval(EvalArgs),
    /// Sweep one generation setting.
    Ablate(AblateArgs),
    /// Print the memory timeline of an event log.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct WorldArgs {
    #[arg(long, default_value_t = 30)]
    pub entities: usize,
    #[arg(long, default_value_t = 6)]
    pub facts_per_entity: usize,
    #[arg(long, default_value_t = 0.3)]
    pub corruption_rate: f64,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Passage JSONL (`id`, `text`, `source`); defaults to the world datastore.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Also encode every passage into a precompute store.
    #[arg(long)]
    pub precompute: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, conflicts_with = "entity")]
    pub prompt: Option<String>,
    /// Ask about this world entity (the first one by default).
    #[arg(long)]
    pub entity: Option<String>,
    /// Print every event as it happens.
    #[arg(long)]
    pub trace: bool,
    /// Event log destination; defaults to `events.jsonl` in the data dir.
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub prompts: Option<usize>,
    /// Comma-separated systems.
    #[arg(long, value_delimiter = ',')]
    pub systems: Vec<String>,
    #[arg(long)]
    pub sequential: bool,
    #[command(flatten)]
    pub gen: GenFlags,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Recall cap; defaults to the median claim count of plain decoding.
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub sequential: bool,
    #[command(flatten)]
    pub gen: GenFlags,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub events: Option<PathBuf>,
}

pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ewe_core::Error> for Failure {
    fn from(e: ewe_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
