mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use globaldoc::{Error, ErrorKind};

/// Multimodal document pretraining (L2M / L2U / L2R) and evaluation on
/// synthetic paired corpora.
#[derive(Debug, Parser)]
#[command(name = "globaldoc", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key = value config file (overridden by flags).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra override, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; receives the resolved config and all artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelInput {
    /// Pretraining output (or checkpoint) directory; omitted means freshly
    /// initialized weights.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired-document corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        separability: Option<f64>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
    },
    /// Self-supervised pretraining (S1, S2 or S3).
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Episodic few-shot classification on the novel classes.
    EvalFewshot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        meta_steps: Option<usize>,
    },
    /// Uni-modal and cross-modal retrieval with Recall@K.
    EvalRetrieval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
    },
    /// Linear classifier on frozen embeddings.
    LinearProbe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        modality: Option<String>,
    },
    /// Write document embeddings in the GEMB format.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
        #[arg(long)]
        modality: Option<String>,
        /// Corpus split to embed.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference certification of every objective.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "S3")]
        setting: String,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates sampled per parameter tensor (all when omitted).
        #[arg(long)]
        max_coords: Option<usize>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
