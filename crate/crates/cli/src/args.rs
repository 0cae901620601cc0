use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use listrank::encoder::Pooling;
use listrank::losses::LossName;
use listrank::training::LrSchedule;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "listrank", version, about = "Train, distill and serve learning-to-rank encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file with default settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed for every random choice.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with overlap-based relevance.
    SynthData(SynthDataCmd),
    /// Train a BPE tokenizer on dataset or corpus text.
    TokenizeTrain(TokenizeTrainCmd),
    /// Masked-LM pre-training.
    Pretrain(PretrainCmd),
    /// Fine-tune a cross-encoder with a ranking loss.
    Train(TrainCmd),
    /// Mean NDCG of a checkpoint on a dataset.
    Eval(EvalCmd),
    /// Distill a cross-encoder into a bi-encoder.
    Distill(DistillCmd),
    /// Build an embedding store, or rank candidates for a query.
    Rank(RankCmd),
    /// Compare cross-encoder and bi-encoder ranking latency.
    Bench(BenchCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::TokenizeTrain(_) => "tokenize-train",
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Distill(_) => "distill",
            Command::Rank(_) => "rank",
            Command::Bench(_) => "bench",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::SynthData(c) => &c.common,
            Command::TokenizeTrain(c) => &c.common,
            Command::Pretrain(c) => &c.common,
            Command::Train(c) => &c.common,
            Command::Eval(c) => &c.common,
            Command::Distill(c) => &c.common,
            Command::Rank(c) => &c.common,
            Command::Bench(c) => &c.common,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOpts {
    #[arg(long)]
    pub n_queries: Option<usize>,
    #[arg(long)]
    pub list_size: Option<usize>,
    #[arg(long)]
    pub attribute_vocab_size: Option<usize>,
    #[arg(long)]
    pub query_token_count: Option<usize>,
    #[arg(long)]
    pub doc_token_count: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerOpts {
    /// Target vocabulary size, including 261 byte and special tokens.
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderOpts {
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, value_parser = parse_pooling)]
    pub pooling: Option<Pooling>,
}

#[derive(Clone, Debug, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOpts {
    /// One of ranknet, listnet, listmle, approxndcg.
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossName>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub mlm_batch_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// constant or linear (decay towards zero over the run).
    #[arg(long, value_parser = parse_schedule)]
    pub lr_schedule: Option<LrSchedule>,
}

#[derive(Clone, Debug, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchOpts {
    /// Timed queries (warm-up queries are added on top).
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub list_size: Option<usize>,
}

fn parse_loss(s: &str) -> Result<LossName, String> {
    s.parse().map_err(|e: listrank::Error| e.to_string())
}

fn parse_schedule(s: &str) -> Result<LrSchedule, String> {
    s.parse().map_err(|e: listrank::Error| e.to_string())
}

fn parse_pooling(s: &str) -> Result<Pooling, String> {
    match s {
        "cls" => Ok(Pooling::Cls),
        "mean" => Ok(Pooling::Mean),
        _ => Err(format!("unknown pooling {s:?}; expected cls or mean")),
    }
}

#[derive(Debug, Args)]
pub struct SynthDataCmd {
    #[command(flatten)]
    pub common: Common,
    /// Output dataset (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the last `--test-queries` groups here instead of `--out`.
    #[arg(long, requires = "test_queries")]
    pub test_out: Option<PathBuf>,
    #[arg(long, requires = "test_out")]
    pub test_queries: Option<usize>,
    #[command(flatten)]
    pub synth: SynthOpts,
}

#[derive(Debug, Args)]
pub struct TokenizeTrainCmd {
    #[command(flatten)]
    pub common: Common,
    /// Dataset whose query and document texts form the corpus.
    #[arg(long, required_unless_present = "corpus", conflicts_with = "corpus")]
    pub data: Option<PathBuf>,
    /// Plain-text corpus, one text per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tokenizer: TokenizerOpts,
}

#[derive(Debug, Args)]
pub struct PretrainCmd {
    #[command(flatten)]
    pub common: Common,
    /// Dataset; each query is paired with each of its documents as one text.
    #[arg(long, required_unless_present = "corpus", conflicts_with = "corpus")]
    pub data: Option<PathBuf>,
    /// Plain-text corpus, one text per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Existing tokenizer; trained on the corpus when absent.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Fraction of texts held out for perplexity, taken from the end.
    #[arg(long, default_value_t = 0.1)]
    pub heldout_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tokenizer_opts: TokenizerOpts,
    #[command(flatten)]
    pub encoder: EncoderOpts,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: Common,
    /// Training dataset (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset evaluated after each epoch.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long, conflicts_with = "tokenizer")]
    pub init: Option<PathBuf>,
    /// Tokenizer for a fresh initialization; trained on the data when absent.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tokenizer_opts: TokenizerOpts,
    #[command(flatten)]
    pub encoder: EncoderOpts,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// For a bi-encoder: teacher whose margins define the reported loss.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct DistillCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct RankCmd {
    #[command(flatten)]
    pub common: Common,
    /// Bi-encoder (student) or cross-encoder (teacher) checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset whose documents form the catalog.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Precomputed embedding store for a bi-encoder.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Query text; without it, an embedding store is built into `--out`.
    #[arg(long)]
    pub query: Option<String>,
    /// Comma-separated candidate doc ids; defaults to the whole catalog or store.
    #[arg(long, value_delimiter = ',')]
    pub candidates: Option<Vec<String>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Dataset the query workload is drawn from.
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the report CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub bench: BenchOpts,
}
