//! Optimization loops: masked-LM pre-training, ranking fine-tuning of the
//! cross-encoder, and distillation into a bi-encoder.

mod adam;
mod checkpoint;
mod distill;
mod finetune;
mod pretrain;

use serde::{Deserialize, Serialize};

use crate::dataset::Document;
use crate::encoder::{embed_text, score_cls, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{LossName, RankingLoss};
use crate::metrics::MetricRow;
use crate::tokenizer::{TokenSequence, Tokenizer};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, ModelKind, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use distill::{
    distill, distill_from_scores, distillation_pairs, evaluate_bi_encoder, finetune_bi_encoder, student_scores,
    teacher_scores,
    MAX_PAIRS_PER_QUERY,
};
pub use finetune::{encode_group, evaluate_cross_encoder, finetune_ltr, ltr_batch_gradient, EncodedGroup};
pub use pretrain::{heldout_mlm_loss, pretrain_mlm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossName,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Query groups per optimizer step.
    pub batch_size: usize,
    /// Texts per optimizer step during masked-LM pre-training.
    pub mlm_batch_size: usize,
    pub seed: u64,
    /// Sigmoid sharpness of approxNDCG.
    pub alpha: f64,
    pub mask_rate: f64,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    pub lr_schedule: LrSchedule,
}

/// Learning rate over the course of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly from `lr` towards zero at the final step.
    Linear,
}

impl LrSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Linear => "linear",
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear" => Ok(LrSchedule::Linear),
            _ => Err(Error::Config(format!("unknown lr schedule {s:?}; expected one of: constant, linear"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            loss: LossName::ApproxNdcg,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            epochs: 10,
            batch_size: 1,
            mlm_batch_size: 16,
            seed: 0,
            alpha: 1.0,
            mask_rate: 0.15,
            eval_every: 1,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    /// Zero epochs is accepted and returns the starting weights unchanged.
    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        RankingLoss::new(self.loss, self.alpha)?;
        if self.batch_size == 0 || self.mlm_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::Config(format!("mask rate must lie in (0, 1], got {}", self.mask_rate)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }

    /// Optimizer settings for the step after `taken` of `total` steps.
    pub fn adam_at(&self, taken: u64, total: u64) -> AdamConfig {
        let mut adam = self.adam();
        if self.lr_schedule == LrSchedule::Linear && total > 0 {
            adam.lr *= (1.0 - taken as f64 / total as f64).max(f64::MIN_POSITIVE);
        }
        adam
    }

    pub fn ranking_loss(&self) -> Result<RankingLoss> {
        RankingLoss::new(self.loss, self.alpha)
    }

    fn evaluates_at(&self, epoch: usize) -> bool {
        epoch % self.eval_every == 0 || epoch == self.epochs
    }
}

/// A trained model and its per-epoch metric history.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<MetricRow>,
}

// Seed streams, so that independent random choices never share a sequence.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_TIES: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_HELDOUT: u64 = 4;

fn check_pair_len(max_len: usize) -> Result<()> {
    if max_len < 4 {
        return Err(Error::Config(format!("max_len {max_len} too short for query/document pairs")));
    }
    Ok(())
}

/// Cross-encoder scores of `docs` for `query`, one packed forward pass.
pub fn score_documents(
    params: &EncoderParams,
    tokenizer: &Tokenizer,
    query: &str,
    docs: &[Document],
) -> Result<Vec<f64>> {
    if docs.is_empty() {
        return Ok(Vec::new());
    }
    check_pair_len(params.config.max_len)?;
    let seqs: Vec<TokenSequence> =
        docs.iter().map(|d| tokenizer.encode_pair(query, &d.text, params.config.max_len)).collect();
    Ok(score_cls(params, &seqs)?.0)
}

/// Pooled bi-encoder embeddings of `texts`, one row each.
pub fn embed_texts(params: &EncoderParams, tokenizer: &Tokenizer, texts: &[&str]) -> Result<ndarray::Array2<f64>> {
    let seqs: Vec<TokenSequence> =
        texts.iter().map(|t| tokenizer.encode_single(t, params.config.max_len)).collect();
    Ok(embed_text(params, &seqs)?.0)
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::util::rng(seed));
    order
}
