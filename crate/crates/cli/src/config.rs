use std::path::Path;

use listrank::dataset::SyntheticSpec;
use listrank::encoder::EncoderConfig;
use listrank::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::args::{BenchOpts, EncoderOpts, SynthOpts, TokenizerOpts, TrainOpts};
use crate::UsageError;

pub const DEFAULT_VOCAB_SIZE: usize = 2000;
pub const DEFAULT_BENCH_QUERIES: usize = 100;
pub const DEFAULT_BENCH_LIST_SIZE: usize = 30;

/// Settings read from `--config`. Every section is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub synthetic: SynthOpts,
    #[serde(default)]
    pub tokenizer: TokenizerOpts,
    #[serde(default)]
    pub encoder: EncoderOpts,
    #[serde(default)]
    pub train: TrainOpts,
    #[serde(default)]
    pub bench: BenchOpts,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig, UsageError> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))
}

/// Field-wise `flag.or(file)`.
macro_rules! overlay {
    ($flags:expr, $file:expr, $ty:ident { $($f:ident),* }) => {{
        let (a, b) = ($flags, $file);
        $ty { $($f: a.$f.clone().or(b.$f.clone())),* }
    }};
}

pub fn synth_spec(flags: &SynthOpts, file: &SynthOpts, seed: u64) -> SyntheticSpec {
    let o = overlay!(flags, file, SynthOpts {
        n_queries, list_size, attribute_vocab_size, query_token_count, doc_token_count, noise_std
    });
    let d = SyntheticSpec::default();
    SyntheticSpec {
        n_queries: o.n_queries.unwrap_or(d.n_queries),
        list_size: o.list_size.unwrap_or(d.list_size),
        attribute_vocab_size: o.attribute_vocab_size.unwrap_or(d.attribute_vocab_size),
        query_token_count: o.query_token_count.unwrap_or(d.query_token_count),
        doc_token_count: o.doc_token_count.unwrap_or(d.doc_token_count),
        noise_std: o.noise_std.unwrap_or(d.noise_std),
        seed,
    }
}

pub fn vocab_size(flags: &TokenizerOpts, file: &TokenizerOpts) -> usize {
    flags.vocab_size.or(file.vocab_size).unwrap_or(DEFAULT_VOCAB_SIZE)
}

/// Encoder shape for a fresh model; `vocab_size` comes from the tokenizer.
pub fn encoder_config(flags: &EncoderOpts, file: &EncoderOpts, vocab_size: usize) -> EncoderConfig {
    let o = overlay!(flags, file, EncoderOpts { n_layers, n_heads, model_dim, ffn_dim, max_len, pooling });
    let d = EncoderConfig::desk(vocab_size);
    EncoderConfig {
        n_layers: o.n_layers.unwrap_or(d.n_layers),
        n_heads: o.n_heads.unwrap_or(d.n_heads),
        model_dim: o.model_dim.unwrap_or(d.model_dim),
        ffn_dim: o.ffn_dim.unwrap_or(d.ffn_dim),
        max_len: o.max_len.unwrap_or(d.max_len),
        pooling: o.pooling.unwrap_or(d.pooling),
        vocab_size,
    }
}

pub fn train_config(flags: &TrainOpts, file: &TrainOpts, seed: u64) -> TrainConfig {
    let o = overlay!(flags, file, TrainOpts {
        loss, lr, beta1, beta2, epsilon, epochs, batch_size, mlm_batch_size, alpha, mask_rate, eval_every, lr_schedule
    });
    let d = TrainConfig::default();
    TrainConfig {
        loss: o.loss.unwrap_or(d.loss),
        lr: o.lr.unwrap_or(d.lr),
        beta1: o.beta1.unwrap_or(d.beta1),
        beta2: o.beta2.unwrap_or(d.beta2),
        epsilon: o.epsilon.unwrap_or(d.epsilon),
        epochs: o.epochs.unwrap_or(d.epochs),
        batch_size: o.batch_size.unwrap_or(d.batch_size),
        mlm_batch_size: o.mlm_batch_size.unwrap_or(d.mlm_batch_size),
        seed,
        alpha: o.alpha.unwrap_or(d.alpha),
        mask_rate: o.mask_rate.unwrap_or(d.mask_rate),
        eval_every: o.eval_every.unwrap_or(d.eval_every),
        lr_schedule: o.lr_schedule.unwrap_or(d.lr_schedule),
    }
}

pub fn bench_sizes(flags: &BenchOpts, file: &BenchOpts) -> (usize, usize) {
    (
        flags.queries.or(file.queries).unwrap_or(DEFAULT_BENCH_QUERIES),
        flags.list_size.or(file.list_size).unwrap_or(DEFAULT_BENCH_LIST_SIZE),
    )
}

/// The fully resolved settings of one run, echoed to standard error.
#[derive(Debug, Default, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub paths: std::collections::BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<(usize, usize)>,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64) -> Self {
        Self { command: command.into(), seed, ..Default::default() }
    }

    pub fn path(&mut self, name: &str, path: Option<&Path>) -> &mut Self {
        if let Some(p) = path {
            self.paths.insert(name.into(), p.display().to_string());
        }
        self
    }

    pub fn echo(&self) {
        match toml::to_string(self) {
            Ok(text) => eprintln!("# resolved config\n{text}"),
            Err(e) => eprintln!("# resolved config unavailable: {e}"),
        }
    }
}
