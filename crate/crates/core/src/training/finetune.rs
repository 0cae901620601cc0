use crate::dataset::{Dataset, QueryGroup};
use crate::derive_seed;
use crate::encoder::{backward_scores, score_cls, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{ListTarget, RankingLoss};
use crate::metrics::{ndcg_at_k, ranked_grades, Cutoff, MetricRow};
use crate::tokenizer::{TokenSequence, Tokenizer};

use super::{
    adam_step, check_pair_len, shuffled, AdamState, Checkpoint, ModelKind, TrainConfig, TrainOutput, TrainingMeta,
    STREAM_SHUFFLE, STREAM_TIES,
};

/// A query group's pair encodings and grades, ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedGroup {
    pub seqs: Vec<TokenSequence>,
    pub target: ListTarget,
}

pub fn encode_group(tokenizer: &Tokenizer, group: &QueryGroup, max_len: usize) -> Result<EncodedGroup> {
    check_pair_len(max_len)?;
    Ok(EncodedGroup {
        seqs: group.docs().iter().map(|d| tokenizer.encode_pair(group.query_text(), &d.text, max_len)).collect(),
        target: ListTarget::new(group.grades().to_vec()),
    })
}

/// Scores one group, applies the loss, and accumulates its parameter
/// gradient into `grads`. Returns the loss value and the scores.
fn group_step(
    params: &EncoderParams,
    group: &EncodedGroup,
    loss: &RankingLoss,
    tie_seed: u64,
    grads: &mut EncoderParams,
) -> Result<(f64, Vec<f64>)> {
    let (scores, trace) = score_cls(params, &group.seqs)?;
    let out = loss.compute(&scores, &group.target, tie_seed)?;
    backward_scores(params, &trace, &out.grad, grads)?;
    Ok((out.value, scores))
}

/// Mean loss and mean parameter gradient over a batch of groups.
pub fn ltr_batch_gradient(
    params: &EncoderParams,
    groups: &[&EncodedGroup],
    loss: &RankingLoss,
    tie_seeds: &[u64],
) -> Result<(f64, EncoderParams)> {
    if groups.is_empty() || groups.len() != tie_seeds.len() {
        return Err(Error::Contract("batch needs one tie seed per group".into()));
    }
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for (g, &seed) in groups.iter().zip(tie_seeds) {
        total += group_step(params, g, loss, seed, &mut grads)?.0;
    }
    let n = groups.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Mean loss and mean NDCG over `dataset` with fixed parameters.
pub(super) fn evaluate_groups(
    params: &EncoderParams,
    dataset: &Dataset,
    encoded: &[EncodedGroup],
    loss: &RankingLoss,
    seed: u64,
) -> Result<(f64, f64)> {
    let (mut loss_sum, mut ndcg_sum) = (0.0, 0.0);
    for (gi, (group, enc)) in dataset.groups().iter().zip(encoded).enumerate() {
        let (scores, _) = score_cls(params, &enc.seqs)?;
        loss_sum += loss.compute(&scores, &enc.target, derive_seed(seed, &[STREAM_TIES, 0, gi as u64]))?.value;
        ndcg_sum += ndcg_at_k(&ranked_grades(group, &scores)?, Cutoff::Full)?;
    }
    let n = dataset.len() as f64;
    Ok((loss_sum / n, ndcg_sum / n))
}

/// Fine-tunes a cross-encoder with a ranking loss.
///
/// Each epoch visits the training groups in a seeded random order. Groups
/// are scored in one packed forward pass each and their gradients are
/// averaged over `batch_size` groups per Adam step. The history holds a
/// `train` row per epoch (NDCG from the scores seen during the epoch) and,
/// when `eval` is given, an `eval` row at epoch 0 and at every evaluation
/// epoch.
pub fn finetune_ltr(
    train: &Dataset,
    eval: Option<&Dataset>,
    init: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let loss = cfg.ranking_loss()?;
    let tokenizer = init.tokenizer();
    let max_len = init.config().max_len;
    let encode = |d: &Dataset| -> Result<Vec<EncodedGroup>> {
        d.groups().iter().map(|g| encode_group(tokenizer, g, max_len)).collect()
    };
    let encoded = encode(train)?;
    let eval_set = match eval {
        Some(d) if !d.is_empty() => Some((d, encode(d)?)),
        Some(_) => return Err(Error::EmptyDataset),
        None => None,
    };

    let loss_name = cfg.loss.as_str().to_string();
    let mut params = init.params().clone();
    let mut state = AdamState::new(&params);
    let mut history = Vec::new();
    let record_eval = |params: &EncoderParams, epoch: usize, history: &mut Vec<MetricRow>| -> Result<()> {
        if let Some((d, enc)) = &eval_set {
            let (loss_value, mean_ndcg) = evaluate_groups(params, d, enc, &loss, cfg.seed)?;
            history.push(MetricRow { epoch, split: "eval".into(), loss_name: loss_name.clone(), loss_value, mean_ndcg });
        }
        Ok(())
    };
    record_eval(&params, 0, &mut history)?;

    let total_steps = (cfg.epochs * train.len().div_ceil(cfg.batch_size)) as u64;
    for epoch in 1..=cfg.epochs {
        let order = shuffled(train.len(), derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut ndcg_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            for &gi in batch {
                let seed = derive_seed(cfg.seed, &[STREAM_TIES, epoch as u64, gi as u64]);
                let (value, scores) = group_step(&params, &encoded[gi], &loss, seed, &mut grads)?;
                loss_sum += value;
                ndcg_sum += ndcg_at_k(&ranked_grades(&train.groups()[gi], &scores)?, Cutoff::Full)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            let adam = cfg.adam_at(state.step(), total_steps);
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }
        let n = train.len() as f64;
        history.push(MetricRow {
            epoch,
            split: "train".into(),
            loss_name: loss_name.clone(),
            loss_value: loss_sum / n,
            mean_ndcg: ndcg_sum / n,
        });
        if cfg.evaluates_at(epoch) {
            record_eval(&params, epoch, &mut history)?;
        }
    }

    let meta = TrainingMeta {
        kind: ModelKind::CrossEncoder,
        loss_name: Some(loss_name),
        epoch: cfg.epochs,
        seed: cfg.seed,
    };
    Ok(TrainOutput { checkpoint: Checkpoint::new(params, tokenizer.clone(), meta)?, history })
}

/// Mean loss and mean NDCG of a cross-encoder checkpoint on `dataset`.
pub fn evaluate_cross_encoder(ckpt: &Checkpoint, dataset: &Dataset, cfg: &TrainConfig) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let encoded: Vec<EncodedGroup> = dataset
        .groups()
        .iter()
        .map(|g| encode_group(ckpt.tokenizer(), g, ckpt.config().max_len))
        .collect::<Result<_>>()?;
    evaluate_groups(ckpt.params(), dataset, &encoded, &cfg.ranking_loss()?, cfg.seed)
}
