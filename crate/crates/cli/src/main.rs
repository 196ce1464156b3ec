//! `pnet`: pre-train, fine-tune, generate with and evaluate small
//! future n-gram seq2seq models.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A mistake in the user's input: bad paths, files or flags. Exits with 2.
#[derive(Debug)]
pub struct UserError(pub String);

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

#[derive(Parser)]
#[command(name = "pnet", version, about = "Future n-gram prediction seq2seq models on the desk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the training commands. Each one overrides the matching
/// config key; config keys override built-in defaults.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// JSON run configuration [default: none, built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Vocabulary file, one token per line [default: paths.vocab]
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Checkpoint to write [default: paths.checkpoint]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Metrics log, JSON lines [default: paths.metrics, else <checkpoint>.metrics.jsonl]
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Optimizer steps [default: train.steps, else 1000]
    #[arg(long)]
    pub steps: Option<u64>,
    /// Examples per batch [default: train.batch_size, else 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate [default: train.lr, else 3e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Warmup steps [default: train.warmup, else 100]
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Random seed; PNET_SEED overrides the config, this flag overrides both [default: train.seed, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of predicted future tokens n [default: model.ngram, else 2 (base checkpoint's n when fine-tuning)]
    #[arg(long)]
    pub ngram: Option<usize>,
    /// Teacher-forced evaluation interval in steps, 0 = off [default: data.eval_every, else 0]
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Stop early once main-stream accuracy exceeds this [default: data.target_accuracy, else none]
    #[arg(long)]
    pub target_accuracy: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary from a whitespace-tokenized corpus.
    BuildVocab {
        /// Corpus, one document per line [default: none, required]
        #[arg(long)]
        corpus: PathBuf,
        /// Vocabulary file to write [default: none, required]
        #[arg(long)]
        output: PathBuf,
        /// Maximum vocabulary size, reserved tokens included
        #[arg(long, default_value_t = 8000)]
        size: usize,
    },
    /// Denoising pre-training on a plain-text corpus.
    Pretrain {
        #[command(flatten)]
        flags: TrainFlags,
        /// Corpus, one document per line [default: paths.corpus]
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Continue from the checkpoint instead of starting fresh [default: off]
        #[arg(long)]
        resume: bool,
    },
    /// Supervised training on source<TAB>target pairs.
    Finetune {
        #[command(flatten)]
        flags: TrainFlags,
        /// Pair file, one `source<TAB>target` per line [default: paths.pairs]
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Base checkpoint to start from [default: paths.init, else a fresh model]
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Decode every line of an input file with the main stream.
    Generate {
        /// Trained checkpoint [default: none, required]
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocabulary file [default: none, required]
        #[arg(long)]
        vocab: PathBuf,
        /// Input, one source per line [default: none, required]
        #[arg(long)]
        input: PathBuf,
        /// Output file [default: standard output]
        #[arg(long)]
        output: Option<PathBuf>,
        /// Beam size; 1 is greedy
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Length-penalty exponent
        #[arg(long, default_value_t = 1.2)]
        alpha: f64,
        /// Minimum output length in tokens
        #[arg(long, default_value_t = 0)]
        min_len: usize,
        /// Maximum output length in tokens
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        /// Forbid repeating a trigram within one output [default: off]
        #[arg(long)]
        block_trigrams: bool,
    },
    /// Score candidate lines against references and print a JSON report.
    Eval {
        /// Candidate file, one output per line [default: none, required]
        #[arg(long)]
        candidates: PathBuf,
        /// Reference file with the same number of lines [default: none, required]
        #[arg(long)]
        references: PathBuf,
    },
    /// Check every backward rule against finite differences.
    Gradcheck {
        /// Flip the sign of one op's gradient to test the checker [default: none]
        #[arg(long, value_name = "OP")]
        inject_sign_flip: Option<String>,
    },
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::BuildVocab { corpus, output, size } => commands::build_vocab(&corpus, &output, size),
        Command::Pretrain { flags, corpus, resume } => commands::pretrain(flags, corpus, resume),
        Command::Finetune { flags, pairs, init } => commands::finetune(flags, pairs, init),
        Command::Generate {
            checkpoint,
            vocab,
            input,
            output,
            beam,
            alpha,
            min_len,
            max_len,
            block_trigrams,
        } => {
            let cfg = prophetnet::decode::BeamConfig {
                beam,
                alpha,
                min_len,
                max_len,
                block_trigrams,
            };
            commands::generate(&checkpoint, &vocab, &input, output.as_deref(), &cfg)
        }
        Command::Eval { candidates, references } => commands::eval(&candidates, &references),
        Command::Gradcheck { inject_sign_flip } => commands::gradcheck(inject_sign_flip.as_deref()),
    }
}

/// 2 for problems with the user's input, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UserError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<prophetnet::Error>() {
            use prophetnet::Error::*;
            if matches!(e, Config(_) | Format(_) | Io(_) | OutOfVocab { .. }) {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
