//! Evaluation metrics: NDCG over predicted rankings and MLM perplexity.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, QueryGroup, RelevanceGrade};
use crate::error::{Error, Result};
use crate::losses::ideal_dcg;

/// Rank cutoff for NDCG.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cutoff {
    #[default]
    Full,
    At(usize),
}

impl Cutoff {
    fn limit(self, n: usize) -> Result<usize> {
        match self {
            Cutoff::Full => Ok(n),
            Cutoff::At(0) => Err(Error::Config("NDCG cutoff k must be at least 1".into())),
            Cutoff::At(k) => Ok(k.min(n)),
        }
    }
}

/// Indices ordered by descending score, ties by ascending id.
pub fn rank_order<S: AsRef<str>>(ids: &[S], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| ids[a].as_ref().cmp(ids[b].as_ref()))
    });
    order
}

/// A group's grades in predicted order.
pub fn ranked_grades(group: &QueryGroup, scores: &[f64]) -> Result<Vec<RelevanceGrade>> {
    if scores.len() != group.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} documents of query {:?}",
            scores.len(),
            group.len(),
            group.query_id()
        )));
    }
    let ids: Vec<&str> = group.docs().iter().map(|d| d.doc_id.as_str()).collect();
    Ok(rank_order(&ids, scores).into_iter().map(|i| group.grades()[i]).collect())
}

/// DCG@k over grades in predicted order, gain `2^g - 1` and discount
/// `1/log2(1 + rank)`, normalized by the ideal ordering. Lists without any
/// positive grade score 1.
pub fn ndcg_at_k(grades_in_order: &[RelevanceGrade], cutoff: Cutoff) -> Result<f64> {
    let k = cutoff.limit(grades_in_order.len())?;
    let dcg: f64 = grades_in_order[..k]
        .iter()
        .enumerate()
        .map(|(i, g)| g.gain() / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<RelevanceGrade> = grades_in_order.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    ideal.truncate(k);
    let idcg = ideal_dcg(ideal.into_iter());
    if idcg == 0.0 {
        return Ok(1.0);
    }
    Ok(dcg / idcg)
}

/// Unweighted mean of per-query NDCG, accumulated in dataset order.
pub fn mean_ndcg(
    dataset: &Dataset,
    mut scorer: impl FnMut(&QueryGroup) -> Result<Vec<f64>>,
    cutoff: Cutoff,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for group in dataset.groups() {
        let scores = scorer(group)?;
        total += ndcg_at_k(&ranked_grades(group, &scores)?, cutoff)?;
    }
    Ok(total / dataset.len() as f64)
}

pub fn perplexity(mean_mlm_loss: f64) -> f64 {
    mean_mlm_loss.exp()
}

/// One line of training or evaluation history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss_name: String,
    pub loss_value: f64,
    pub mean_ndcg: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss_name,loss_value,mean_ndcg";

fn fixed6(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        "nan".to_string()
    }
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.split,
            self.loss_name,
            fixed6(self.loss_value),
            fixed6(self.mean_ndcg)
        )
    }
}

/// Header plus one line per row, newline-terminated.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}
