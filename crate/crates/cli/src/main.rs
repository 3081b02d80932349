//! `edgeflow` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "edgeflow", version, about = "Concept-graph grounded dialogue generation")]
pub struct Cli {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Top-k aligned targets linked per source concept.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Node-frequency percentile for new nodes.
    #[arg(long, global = true)]
    pub m: Option<f64>,
    /// Fraction of lowest-ranked alignment edges removed by `ablate`.
    #[arg(long, global = true)]
    pub n: Option<f64>,
    /// Edge-transformer layer count.
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    /// Maximum number of 2-hop nodes retrieved.
    #[arg(long, global = true)]
    pub cap: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train IBM Model 1 over post/response concepts and write the alignment TSV.
    Align {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        /// POS lexicon; enables corpus nouns as extra concepts.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalize a raw triples file into a graph file.
    BuildGraph {
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add corpus nouns and alignment edges to a graph.
    Enhance {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Precomputed alignment; trained from the corpus when absent.
        #[arg(long)]
        alignment: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Remove edges to the lowest-ranked aligned targets.
    Ablate {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        alignment: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve the subgraph of one post as JSON.
    Retrieve {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        post: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coverage statistics of a base and an optional enhanced graph.
    Stats {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        enhanced: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the generator; writes checkpoint, vocabulary, config and loss CSV.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Model directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from the checkpoint in the model directory.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a test corpus and report metrics.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Read posts from stdin and print responses until EOF.
    Chat {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EDGEFLOW_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<commands::UsageError>().is_some() {
                eprintln!("usage error: {e:#}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}
