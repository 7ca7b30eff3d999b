use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "genret", version, about = "Generative retrieval with noise-robust training")]
struct Cli {
    /// TOML experiment config. Defaults to `<out-dir>/config.toml` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus, query split and entity lexicon.
    GenCorpus {
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        queries_per_doc: Option<usize>,
        #[arg(long)]
        test_fraction: Option<f64>,
    },
    /// Cluster documents into hierarchical docids.
    BuildDocids {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        leaf_cap: Option<usize>,
    },
    /// Add pseudo-queries to the supervised training queries.
    Qgen {
        #[arg(long)]
        per_doc: Option<usize>,
    },
    /// Write the augmented training set.
    PrepareTraining {
        /// Skip augmentation; the training set equals the pseudo-query set.
        #[arg(long)]
        no_da: bool,
        #[arg(long)]
        n_augments: Option<usize>,
    },
    /// Contrastive pretraining of the encoder for a system.
    Pretrain {
        #[arg(long, default_value = "full")]
        system: String,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune the retriever of one system or of all of them.
    Train {
        #[command(flatten)]
        which: Which,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Rank documents for one query, a query file, or interactive input.
    Search(SearchArgs),
    /// Evaluate every configured system on clean and noisy test sets.
    Eval {
        /// Report path (default `<out-dir>/report.json`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct Which {
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    all: bool,
}

#[derive(Args, Debug)]
struct SearchArgs {
    /// System whose checkpoint (`<out-dir>/<system>.ckpt`) is used; `bm25` needs none.
    #[arg(long, default_value = "full")]
    system: String,
    /// Explicit checkpoint path, overriding --system.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["queries", "repl"])]
    query: Option<String>,
    /// Query file: `id<TAB>text` lines or JSON query records.
    #[arg(long, requires = "run", conflicts_with = "repl")]
    queries: Option<PathBuf>,
    /// Run file written in batch mode.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    repl: bool,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = 10)]
    beam: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
