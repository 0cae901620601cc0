use ndarray::{Array1, Array2, Axis};

use crate::dataset::{Dataset, Document, QueryGroup, RelevanceGrade};
use crate::derive_seed;
use crate::encoder::{backward_embeddings, embed_text, EncoderParams, ForwardTrace};
use crate::error::{Error, Result};
use crate::losses::{margin_mse_loss, ListTarget, LossOutput, RankingLoss};
use crate::metrics::{ndcg_at_k, ranked_grades, Cutoff, MetricRow};
use crate::tokenizer::{TokenSequence, Tokenizer};

use super::{
    adam_step, score_documents, shuffled, AdamState, Checkpoint, ModelKind, TrainConfig, TrainOutput, TrainingMeta,
    STREAM_SHUFFLE, STREAM_TIES,
};

pub const MAX_PAIRS_PER_QUERY: usize = 50;

/// `(higher, lower)` document index pairs whose grades differ by at least
/// one, largest gap first (ties by index), at most [`MAX_PAIRS_PER_QUERY`].
pub fn distillation_pairs(grades: &[RelevanceGrade]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, gi) in grades.iter().enumerate() {
        for (j, gj) in grades.iter().enumerate() {
            if gi.value() > gj.value() {
                pairs.push((gi.value() - gj.value(), i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    pairs.into_iter().take(MAX_PAIRS_PER_QUERY).map(|(_, i, j)| (i, j)).collect()
}

/// Cross-encoder scores for every document of every group, in dataset order.
pub fn teacher_scores(teacher: &Checkpoint, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset
        .groups()
        .iter()
        .map(|g| score_documents(teacher.params(), teacher.tokenizer(), g.query_text(), g.docs()))
        .collect()
}

fn student_inputs(tokenizer: &Tokenizer, query: &str, docs: &[Document], max_len: usize) -> Vec<TokenSequence> {
    std::iter::once(query)
        .chain(docs.iter().map(|d| d.text.as_str()))
        .map(|t| tokenizer.encode_single(t, max_len))
        .collect()
}

/// Embeds `[query, docs...]` and scores each doc by its dot product with
/// the query embedding.
fn student_forward(params: &EncoderParams, seqs: &[TokenSequence]) -> Result<(Vec<f64>, Array2<f64>, ForwardTrace)> {
    let (emb, trace) = embed_text(params, seqs)?;
    let q = emb.row(0);
    let scores = emb.rows().into_iter().skip(1).map(|d| d.dot(&q)).collect();
    Ok((scores, emb, trace))
}

fn student_backward(
    params: &EncoderParams,
    trace: &ForwardTrace,
    emb: &Array2<f64>,
    dscores: &[f64],
    grads: &mut EncoderParams,
) -> Result<()> {
    let q = emb.row(0);
    let mut d_emb = Array2::zeros(emb.raw_dim());
    let mut dq = Array1::zeros(emb.ncols());
    for (j, &ds) in dscores.iter().enumerate() {
        dq.scaled_add(ds, &emb.row(j + 1));
        d_emb.row_mut(j + 1).scaled_add(ds, &q);
    }
    d_emb.index_axis_mut(Axis(0), 0).assign(&dq);
    backward_embeddings(params, trace, &d_emb, grads)
}

/// Bi-encoder scores of `docs` for `query`.
pub fn student_scores(params: &EncoderParams, tokenizer: &Tokenizer, query: &str, docs: &[Document]) -> Result<Vec<f64>> {
    if docs.is_empty() {
        return Ok(Vec::new());
    }
    let seqs = student_inputs(tokenizer, query, docs, params.config.max_len);
    Ok(student_forward(params, &seqs)?.0)
}

/// What the student is trained to fit on one query group.
enum GroupObjective {
    Margin { teacher: Vec<f64>, pairs: Vec<(usize, usize)> },
    Ranking { target: ListTarget, loss: RankingLoss },
}

impl GroupObjective {
    /// Loss and per-document score gradient; `None` if the group has no
    /// training signal.
    fn loss(&self, scores: &[f64], tie_seed: u64) -> Result<Option<LossOutput>> {
        match self {
            GroupObjective::Margin { pairs, .. } if pairs.is_empty() => Ok(None),
            GroupObjective::Margin { teacher, pairs } => {
                let pick = |s: &[f64], first: bool| -> Vec<f64> {
                    pairs.iter().map(|&(p, n)| s[if first { p } else { n }]).collect()
                };
                let out = margin_mse_loss(
                    &pick(teacher, true),
                    &pick(teacher, false),
                    &pick(scores, true),
                    &pick(scores, false),
                )?;
                let mut grad = vec![0.0; scores.len()];
                for (k, &(p, n)) in pairs.iter().enumerate() {
                    grad[p] += out.grad[k];
                    grad[n] += out.grad[pairs.len() + k];
                }
                Ok(Some(LossOutput { value: out.value, grad }))
            }
            GroupObjective::Ranking { target, loss } => Ok(Some(loss.compute(scores, target, tie_seed)?)),
        }
    }
}

fn margin_objectives(dataset: &Dataset, scores: &[Vec<f64>]) -> Result<Vec<GroupObjective>> {
    if scores.len() != dataset.len() {
        return Err(Error::Validation(format!("{} teacher score lists for {} groups", scores.len(), dataset.len())));
    }
    dataset
        .groups()
        .iter()
        .zip(scores)
        .map(|(g, s)| {
            if s.len() != g.len() {
                return Err(Error::Validation(format!("teacher scores do not cover query {:?}", g.query_id())));
            }
            Ok(GroupObjective::Margin { teacher: s.clone(), pairs: distillation_pairs(g.grades()) })
        })
        .collect()
}

struct StudentSet<'a> {
    dataset: &'a Dataset,
    inputs: Vec<Vec<TokenSequence>>,
    objectives: Vec<GroupObjective>,
}

impl<'a> StudentSet<'a> {
    fn new(dataset: &'a Dataset, objectives: Vec<GroupObjective>, tokenizer: &Tokenizer, max_len: usize) -> Self {
        let inputs =
            dataset.groups().iter().map(|g| student_inputs(tokenizer, g.query_text(), g.docs(), max_len)).collect();
        Self { dataset, inputs, objectives }
    }

    fn group(&self, gi: usize) -> &QueryGroup {
        &self.dataset.groups()[gi]
    }

    /// Mean loss over groups with a training signal, and mean NDCG over all.
    fn evaluate(&self, params: &EncoderParams, seed: u64) -> Result<(f64, f64)> {
        let (mut loss_sum, mut counted, mut ndcg_sum) = (0.0, 0usize, 0.0);
        for (gi, seqs) in self.inputs.iter().enumerate() {
            let (scores, _, _) = student_forward(params, seqs)?;
            if let Some(out) = self.objectives[gi].loss(&scores, derive_seed(seed, &[STREAM_TIES, 0, gi as u64]))? {
                loss_sum += out.value;
                counted += 1;
            }
            ndcg_sum += ndcg_at_k(&ranked_grades(self.group(gi), &scores)?, Cutoff::Full)?;
        }
        Ok((mean(loss_sum, counted), ndcg_sum / self.inputs.len() as f64))
    }
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn train_student(
    train: StudentSet<'_>,
    eval: Option<StudentSet<'_>>,
    init: &Checkpoint,
    cfg: &TrainConfig,
    loss_name: &str,
) -> Result<TrainOutput> {
    let mut params = init.params().clone();
    let mut state = AdamState::new(&params);
    let mut history = Vec::new();
    let record_eval = |params: &EncoderParams, epoch: usize, history: &mut Vec<MetricRow>| -> Result<()> {
        if let Some(set) = &eval {
            let (loss_value, mean_ndcg) = set.evaluate(params, cfg.seed)?;
            history.push(MetricRow { epoch, split: "eval".into(), loss_name: loss_name.into(), loss_value, mean_ndcg });
        }
        Ok(())
    };
    record_eval(&params, 0, &mut history)?;

    let n = train.inputs.len();
    let total_steps = (cfg.epochs * n.div_ceil(cfg.batch_size)) as u64;
    for epoch in 1..=cfg.epochs {
        let order = shuffled(n, derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut counted, mut ndcg_sum) = (0.0, 0usize, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            let mut contributing = 0usize;
            for &gi in batch {
                let (scores, emb, trace) = student_forward(&params, &train.inputs[gi])?;
                ndcg_sum += ndcg_at_k(&ranked_grades(train.group(gi), &scores)?, Cutoff::Full)?;
                let seed = derive_seed(cfg.seed, &[STREAM_TIES, epoch as u64, gi as u64]);
                if let Some(out) = train.objectives[gi].loss(&scores, seed)? {
                    student_backward(&params, &trace, &emb, &out.grad, &mut grads)?;
                    loss_sum += out.value;
                    contributing += 1;
                }
            }
            if contributing == 0 {
                continue;
            }
            counted += contributing;
            grads.scale(1.0 / contributing as f64);
            let adam = cfg.adam_at(state.step(), total_steps);
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }
        history.push(MetricRow {
            epoch,
            split: "train".into(),
            loss_name: loss_name.into(),
            loss_value: mean(loss_sum, counted),
            mean_ndcg: ndcg_sum / n as f64,
        });
        if cfg.evaluates_at(epoch) {
            record_eval(&params, epoch, &mut history)?;
        }
    }

    let meta = TrainingMeta {
        kind: ModelKind::BiEncoder,
        loss_name: Some(loss_name.into()),
        epoch: cfg.epochs,
        seed: cfg.seed,
    };
    Ok(TrainOutput { checkpoint: Checkpoint::new(params, init.tokenizer().clone(), meta)?, history })
}

fn check_sets(train: &Dataset, eval: Option<&Dataset>) -> Result<()> {
    if train.is_empty() || eval.is_some_and(Dataset::is_empty) {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Distills a cross-encoder teacher into a weight-shared bi-encoder that
/// starts from the teacher's weights.
pub fn distill(teacher: &Checkpoint, train: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    check_sets(train, eval)?;
    let train_scores = teacher_scores(teacher, train)?;
    let eval_scores = eval.map(|d| teacher_scores(teacher, d)).transpose()?;
    distill_from_scores(teacher, train, &train_scores, eval.zip(eval_scores.as_deref()), cfg)
}

/// Margin-MSE distillation against precomputed teacher scores, starting
/// from `init`.
pub fn distill_from_scores(
    init: &Checkpoint,
    train: &Dataset,
    train_scores: &[Vec<f64>],
    eval: Option<(&Dataset, &[Vec<f64>])>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_sets(train, eval.map(|e| e.0))?;
    let objectives = margin_objectives(train, train_scores)?;
    if objectives.iter().all(|o| matches!(o, GroupObjective::Margin { pairs, .. } if pairs.is_empty())) {
        return Err(Error::NoPairs);
    }
    let (tok, max_len) = (init.tokenizer(), init.config().max_len);
    let train_set = StudentSet::new(train, objectives, tok, max_len);
    let eval_set = match eval {
        Some((d, s)) => Some(StudentSet::new(d, margin_objectives(d, s)?, tok, max_len)),
        None => None,
    };
    train_student(train_set, eval_set, init, cfg, "margin_mse")
}

/// Trains the bi-encoder directly on grades with the configured ranking
/// loss, without a teacher.
pub fn finetune_bi_encoder(
    train: &Dataset,
    eval: Option<&Dataset>,
    init: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_sets(train, eval)?;
    let loss = cfg.ranking_loss()?;
    let objectives = |d: &Dataset| -> Vec<GroupObjective> {
        d.groups()
            .iter()
            .map(|g| GroupObjective::Ranking { target: ListTarget::new(g.grades().to_vec()), loss })
            .collect()
    };
    let (tok, max_len) = (init.tokenizer(), init.config().max_len);
    let train_set = StudentSet::new(train, objectives(train), tok, max_len);
    let eval_set = eval.map(|d| StudentSet::new(d, objectives(d), tok, max_len));
    train_student(train_set, eval_set, init, cfg, cfg.loss.as_str())
}

/// Mean margin loss (against `teacher`) and mean NDCG of a bi-encoder
/// checkpoint on `dataset`.
pub fn evaluate_bi_encoder(student: &Checkpoint, dataset: &Dataset, teacher: Option<&Checkpoint>) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let objectives = match teacher {
        Some(t) => margin_objectives(dataset, &teacher_scores(t, dataset)?)?,
        None => dataset.groups().iter().map(|_| GroupObjective::Margin { teacher: vec![], pairs: vec![] }).collect(),
    };
    let set = StudentSet::new(dataset, objectives, student.tokenizer(), student.config().max_len);
    set.evaluate(student.params(), student.meta().seed)
}
