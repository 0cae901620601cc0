use ndarray::Array2;

use crate::derive_seed;
use crate::encoder::{backward_mlm, forward, init_params, mlm_logits, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::mlm_cross_entropy;
use crate::metrics::MetricRow;
use crate::tokenizer::{mask_for_mlm, TokenSequence, Tokenizer};

use super::{
    adam_step, shuffled, AdamState, Checkpoint, ModelKind, TrainConfig, TrainOutput, TrainingMeta, STREAM_HELDOUT,
    STREAM_MASK, STREAM_SHUFFLE,
};

const EVAL_CHUNK: usize = 64;

/// Masks a batch and returns the masked sequences with the global row of
/// every masked position and its original id.
fn mask_batch(
    seqs: impl Iterator<Item = (u64, TokenSequence)>,
    rate: f64,
) -> Result<(Vec<TokenSequence>, Vec<usize>, Vec<u32>)> {
    let (mut masked, mut rows, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    let mut offset = 0;
    for (seed, seq) in seqs {
        let (m, l) = mask_for_mlm(&seq, rate, seed)?;
        for (pos, label) in l.iter().enumerate() {
            if let Some(id) = label {
                rows.push(offset + pos);
                labels.push(*id);
            }
        }
        offset += m.len();
        masked.push(m);
    }
    Ok((masked, rows, labels))
}

/// Summed cross-entropy and count of masked tokens for one batch. With
/// `grads`, also accumulates the gradient of the batch mean.
fn mlm_batch(
    params: &EncoderParams,
    masked: &[TokenSequence],
    rows: &[usize],
    labels: &[u32],
    grads: Option<&mut EncoderParams>,
) -> Result<(f64, usize)> {
    let (hidden, trace) = forward(params, masked)?;
    let logits = mlm_logits(params, &hidden, rows)?;
    let out = mlm_cross_entropy(&logits, labels)?;
    if let Some(grads) = grads {
        let d_logits = Array2::from_shape_vec(logits.raw_dim(), out.grad).expect("gradient matches logits");
        backward_mlm(params, &trace, rows, &d_logits, grads)?;
    }
    Ok((out.value * rows.len() as f64, rows.len()))
}

fn encode_corpus(tokenizer: &Tokenizer, texts: &[String], max_len: usize) -> Vec<TokenSequence> {
    texts.iter().map(|t| tokenizer.encode_single(t, max_len)).collect()
}

/// Token-weighted mean masked-LM loss over `texts`, each masked with a
/// fixed per-text seed so repeated calls agree.
pub fn heldout_mlm_loss(
    params: &EncoderParams,
    tokenizer: &Tokenizer,
    texts: &[String],
    mask_rate: f64,
    seed: u64,
) -> Result<f64> {
    let encoded = encode_corpus(tokenizer, texts, params.config.max_len);
    heldout_encoded(params, &encoded, mask_rate, seed)
}

fn heldout_encoded(params: &EncoderParams, encoded: &[TokenSequence], mask_rate: f64, seed: u64) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0);
    for (c, chunk) in encoded.chunks(EVAL_CHUNK).enumerate() {
        let seeds = (0..chunk.len()).map(|i| derive_seed(seed, &[STREAM_HELDOUT, (c * EVAL_CHUNK + i) as u64]));
        let (masked, rows, labels) = mask_batch(seeds.zip(chunk.iter().cloned()), mask_rate)?;
        if rows.is_empty() {
            continue;
        }
        let (s, n) = mlm_batch(params, &masked, &rows, &labels, None)?;
        sum += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Masked-LM pre-training from a fresh initialization.
///
/// The history has one `train` row per epoch with the token-weighted mean
/// loss and, when `heldout` is non-empty, a `heldout` row at epoch 0 and
/// after every evaluation epoch. Perplexity is `exp` of the loss column.
pub fn pretrain_mlm(
    corpus: &[String],
    heldout: &[String],
    tokenizer: &Tokenizer,
    config: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if tokenizer.vocab_size() != config.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} tokens but the encoder expects {}",
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }
    let encoded = encode_corpus(tokenizer, corpus, config.max_len);
    let heldout = encode_corpus(tokenizer, heldout, config.max_len);
    let mut params = init_params(config, cfg.seed)?;
    let mut state = AdamState::new(&params);
    let mut history = Vec::new();
    let row = |epoch, split: &str, loss_value| MetricRow {
        epoch,
        split: split.into(),
        loss_name: "mlm".into(),
        loss_value,
        mean_ndcg: f64::NAN,
    };
    if !heldout.is_empty() {
        history.push(row(0, "heldout", heldout_encoded(&params, &heldout, cfg.mask_rate, cfg.seed)?));
    }

    let total_steps = (cfg.epochs * encoded.len().div_ceil(cfg.mlm_batch_size)) as u64;
    for epoch in 1..=cfg.epochs {
        let order = shuffled(encoded.len(), derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let (mut sum, mut count) = (0.0, 0);
        for batch in order.chunks(cfg.mlm_batch_size) {
            let seqs = batch.iter().map(|&i| {
                (derive_seed(cfg.seed, &[STREAM_MASK, epoch as u64, i as u64]), encoded[i].clone())
            });
            let (masked, rows, labels) = mask_batch(seqs, cfg.mask_rate)?;
            if rows.is_empty() {
                continue;
            }
            let mut grads = params.zeros_like();
            let (s, n) = mlm_batch(&params, &masked, &rows, &labels, Some(&mut grads))?;
            let adam = cfg.adam_at(state.step(), total_steps);
            adam_step(&mut params, &grads, &mut state, &adam)?;
            sum += s;
            count += n;
        }
        history.push(row(epoch, "train", if count > 0 { sum / count as f64 } else { f64::NAN }));
        if !heldout.is_empty() && cfg.evaluates_at(epoch) {
            history.push(row(epoch, "heldout", heldout_encoded(&params, &heldout, cfg.mask_rate, cfg.seed)?));
        }
    }

    let meta = TrainingMeta { kind: ModelKind::Mlm, loss_name: Some("mlm".into()), epoch: cfg.epochs, seed: cfg.seed };
    Ok(TrainOutput { checkpoint: Checkpoint::new(params, tokenizer.clone(), meta)?, history })
}
