//! Command-line pipeline for training and evaluating CatBERT detectors.

mod commands;
mod detector;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "catbert", version, about, arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for parallel scoring and preprocessing.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Where to write the run manifest instead of next to the outputs.
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Sequence length including [CLS] and [SEP].
    #[arg(long, value_name = "N")]
    pub max_len: Option<usize>,
    /// Which end of over-long content to keep.
    #[arg(long, value_name = "head|tail")]
    pub truncate: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModelSource {
    /// Model JSON config file.
    #[arg(long, value_name = "FILE", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in model config: catbert, distilbert or tiny.
    #[arg(long)]
    pub preset: Option<String>,
    /// Block plan override, e.g. T,A,T,A,T,A.
    #[arg(long)]
    pub plan: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw records into content and context features.
    Ingest {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Fail on the first malformed line instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Split a dataset by first-seen time into train, validation and test.
    Split {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Directory receiving train.jsonl, validation.jsonl and test.jsonl.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value = "0.7,0.15,0.15")]
        fractions: String,
    },
    /// Fine-tune a CatBERT model or fit the TF-IDF baseline.
    Train(TrainArgs),
    /// Build a smaller model from a donor's embeddings and chosen blocks.
    Surgery {
        #[arg(long, value_name = "DIR")]
        donor: PathBuf,
        /// Donor transformer indices to keep, in plan order.
        #[arg(long, default_value = "0,2,4")]
        keep: String,
        /// Plan of the new model; defaults to alternating T,A per kept block.
        #[arg(long)]
        plan: Option<String>,
        /// Start adapters as the identity map.
        #[arg(long)]
        zero_adapters: bool,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Print the parameter report of a model config.
    Params {
        #[command(flatten)]
        model: ModelSource,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Compute AUC and TPR at fixed FPRs on a labelled dataset.
    Eval {
        /// Model directory; repeat to aggregate several runs.
        #[arg(long = "model", value_name = "DIR", required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        #[arg(long, default_value = "1e-4,1e-3,1e-2,1e-1")]
        fprs: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// ROC curve of the first model as CSV.
        #[arg(long, value_name = "FILE")]
        roc: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Score records, one JSON line per record.
    Predict {
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        /// Output file; standard output when absent.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Detection accuracy on malicious records before and after perturbation.
    Attack(AttackArgs),
    /// Explain one record's score with a local linear surrogate.
    Explain {
        #[arg(long, value_name = "DIR")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "ID")]
        record_id: String,
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Time inference of a model config or checkpoint.
    Bench {
        #[command(flatten)]
        source: ModelSource,
        /// Time a trained checkpoint instead of a random model.
        #[arg(long, value_name = "DIR", conflicts_with_all = ["config", "preset"])]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        #[arg(long, default_value = "1")]
        batch_sizes: String,
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Write a randomly initialized checkpoint.
    Init {
        #[command(flatten)]
        source: ModelSource,
        /// Vocabulary fixing the embedding size; copied into the checkpoint.
        #[arg(long, value_name = "FILE")]
        vocab: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Generate the planted-token synthetic corpus and its vocabulary.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        records: usize,
        #[arg(long, default_value_t = 0.1)]
        malicious_fraction: f64,
        /// Malicious only when the planted word comes from outside.
        #[arg(long)]
        context_dependent: bool,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Validation set; otherwise the data is split by time.
    #[arg(long, value_name = "FILE")]
    pub validation: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Run config JSON with optional `model`, `train`, `encode`,
    /// `zero_context` and `baseline` sections.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Start from this checkpoint instead of a random model.
    #[arg(long, value_name = "DIR")]
    pub init: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Fit the TF-IDF logistic regression baseline instead.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Freeze preset, e.g. partial-finetune.
    #[arg(long)]
    pub freeze: Option<String>,
    /// Zero the context features (content-only ablation).
    #[arg(long)]
    pub zero_context: bool,
    #[arg(long, default_value = "0.7,0.15,0.15")]
    pub fractions: String,
    #[command(flatten)]
    pub encode: EncodeArgs,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    #[arg(long, value_name = "typo|synonym|homoglyph")]
    pub kind: String,
    #[arg(long, default_value_t = 0.5)]
    pub rate: f64,
    /// JSON object mapping a word to its replacements.
    #[arg(long, value_name = "FILE")]
    pub synonyms: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5, conflicts_with = "threshold_fpr")]
    pub threshold: f64,
    /// Derive the threshold from this FPR on --validation.
    #[arg(long, requires = "validation")]
    pub threshold_fpr: Option<f64>,
    #[arg(long, value_name = "FILE")]
    pub validation: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Attacked texts as JSON lines.
    #[arg(long, value_name = "FILE")]
    pub samples_out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CATBERT_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
