//! Ranking and distillation loss kernels.
//!
//! Every kernel maps per-document scores (plus targets) to a [`LossOutput`]:
//! the loss value and its analytic gradient with respect to the scores.
//! Slots with `valid_mask == false` are padding: they never affect the value
//! and always receive a zero gradient.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::RelevanceGrade;
use crate::error::{Error, Result};
use crate::util::rng;

const SIGMOID_CLAMP: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossOutput {
    fn zero(n: usize) -> Self {
        Self { value: 0.0, grad: vec![0.0; n] }
    }
}

/// Grades aligned with a score list, plus a padding mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ListTarget {
    pub grades: Vec<RelevanceGrade>,
    pub valid_mask: Vec<bool>,
}

impl ListTarget {
    /// A target with every slot valid.
    pub fn new(grades: Vec<RelevanceGrade>) -> Self {
        let valid_mask = vec![true; grades.len()];
        Self { grades, valid_mask }
    }

    pub fn with_mask(grades: Vec<RelevanceGrade>, valid_mask: Vec<bool>) -> Result<Self> {
        if grades.len() != valid_mask.len() {
            return Err(Error::Validation(format!(
                "{} grades but {} mask entries",
                grades.len(),
                valid_mask.len()
            )));
        }
        Ok(Self { grades, valid_mask })
    }

    fn valid_indices(&self, scores: &[f64]) -> Result<Vec<usize>> {
        if scores.len() != self.grades.len() || self.valid_mask.len() != self.grades.len() {
            return Err(Error::Validation(format!(
                "{} scores for {} grades",
                scores.len(),
                self.grades.len()
            )));
        }
        let idx: Vec<usize> = (0..scores.len()).filter(|&i| self.valid_mask[i]).collect();
        if idx.is_empty() {
            return Err(Error::EmptyList);
        }
        Ok(idx)
    }

    fn grade(&self, i: usize) -> f64 {
        f64::from(self.grades[i].value())
    }
}

/// Sharpness of the sigmoid that smooths rank positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxConfig {
    pub alpha: f64,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

impl ApproxConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("approxNDCG alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Weighted pairwise logistic loss.
///
/// Every valid ordered pair `(m, n)` with `grade_m > grade_n` contributes
/// `(grade_m² - grade_n²) · ln(1 + exp(-(s_m - s_n)))`. The sum is divided
/// by the number of contributing pairs; no pairs means zero loss.
pub fn ranknet_loss(scores: &[f64], target: &ListTarget) -> Result<LossOutput> {
    let idx = target.valid_indices(scores)?;
    let mut out = LossOutput::zero(scores.len());
    let mut pairs = 0usize;
    for &m in &idx {
        for &n in &idx {
            let (gm, gn) = (target.grade(m), target.grade(n));
            if gm <= gn {
                continue;
            }
            let weight = gm * gm - gn * gn;
            let diff = scores[m] - scores[n];
            out.value += weight * softplus(-diff);
            let g = -weight * sigmoid(-diff);
            out.grad[m] += g;
            out.grad[n] -= g;
            pairs += 1;
        }
    }
    if pairs > 0 {
        let inv = 1.0 / pairs as f64;
        out.value *= inv;
        out.grad.iter_mut().for_each(|g| *g *= inv);
    }
    Ok(out)
}

/// Top-one cross-entropy between `softmax(grades)` and `softmax(scores)`.
pub fn listnet_loss(scores: &[f64], target: &ListTarget) -> Result<LossOutput> {
    let idx = target.valid_indices(scores)?;
    let lse_s = log_sum_exp(idx.iter().map(|&i| scores[i]));
    let lse_y = log_sum_exp(idx.iter().map(|&i| target.grade(i)));
    let mut out = LossOutput::zero(scores.len());
    for &i in &idx {
        let p_true = (target.grade(i) - lse_y).exp();
        let log_p_pred = scores[i] - lse_s;
        out.value -= p_true * log_p_pred;
        out.grad[i] = log_p_pred.exp() - p_true;
    }
    Ok(out)
}

/// Valid indices sorted by grade descending, ties broken by a shuffle keyed
/// on `tie_seed` before the stable sort.
pub fn listmle_target_order(target: &ListTarget, tie_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..target.grades.len()).filter(|&i| target.valid_mask[i]).collect();
    order.shuffle(&mut rng(tie_seed));
    order.sort_by(|&a, &b| target.grades[b].cmp(&target.grades[a]));
    order
}

/// Negative log Plackett-Luce likelihood of an explicit target order.
/// `order` lists the slots from most to least relevant; slots not listed
/// are ignored.
pub fn listmle_loss_with_order(scores: &[f64], order: &[usize]) -> LossOutput {
    let n = order.len();
    let mut out = LossOutput::zero(scores.len());
    if n == 0 {
        return out;
    }
    // suffix[j] = log Σ_{k >= j} exp(s_order[k])
    let mut suffix = vec![0.0; n];
    suffix[n - 1] = scores[order[n - 1]];
    for j in (0..n - 1).rev() {
        let (a, b) = (scores[order[j]], suffix[j + 1]);
        let hi = a.max(b);
        suffix[j] = hi + ((a - hi).exp() + (b - hi).exp()).ln();
    }
    // prefix[j] = log Σ_{k <= j} exp(-suffix[k])
    let mut prefix = f64::NEG_INFINITY;
    for j in 0..n {
        let s = scores[order[j]];
        out.value += suffix[j] - s;
        let x = -suffix[j];
        let hi = prefix.max(x);
        prefix = hi + ((prefix - hi).exp() + (x - hi).exp()).ln();
        out.grad[order[j]] = (s + prefix).exp() - 1.0;
    }
    out
}

/// ListMLE: negative log-likelihood of the grade-sorted permutation.
pub fn listmle_loss(scores: &[f64], target: &ListTarget, tie_seed: u64) -> Result<LossOutput> {
    target.valid_indices(scores)?;
    Ok(listmle_loss_with_order(scores, &listmle_target_order(target, tie_seed)))
}

fn discount(position: f64) -> f64 {
    std::f64::consts::LN_2 / (1.0 + position).ln()
}

fn discount_grad(position: f64) -> f64 {
    let l = (1.0 + position).ln();
    -std::f64::consts::LN_2 / ((1.0 + position) * l * l)
}

/// Ideal DCG of a set of grades (gain `2^g - 1`, discount `1/log2(1+rank)`).
pub(crate) fn ideal_dcg(grades: impl Iterator<Item = RelevanceGrade>) -> f64 {
    let mut sorted: Vec<RelevanceGrade> = grades.collect();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.iter().enumerate().map(|(i, g)| g.gain() * discount((i + 1) as f64)).sum()
}

/// Negated approximate NDCG.
///
/// Each rank position is replaced by the smooth position
/// `1 + Σ_{j≠i} σ(α(s_j - s_i))`. Lists whose grades are all zero have no
/// ideal gain; they score -1 with zero gradient.
pub fn approxndcg_loss(scores: &[f64], target: &ListTarget, cfg: ApproxConfig) -> Result<LossOutput> {
    let idx = target.valid_indices(scores)?;
    let alpha = ApproxConfig::new(cfg.alpha)?.alpha;
    let mut out = LossOutput::zero(scores.len());
    let idcg = ideal_dcg(idx.iter().map(|&i| target.grades[i]));
    if idcg == 0.0 {
        out.value = -1.0;
        return Ok(out);
    }
    let n = idx.len();
    let mut pos = vec![1.0; n];
    let mut slope = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let sig = sigmoid(alpha * (scores[idx[b]] - scores[idx[a]]));
            pos[a] += sig;
            slope[a * n + b] = sig * (1.0 - sig);
        }
    }
    let mut dcg = 0.0;
    let mut c = vec![0.0; n];
    for a in 0..n {
        let gain = target.grades[idx[a]].gain();
        dcg += gain * discount(pos[a]);
        c[a] = gain * discount_grad(pos[a]);
    }
    out.value = -dcg / idcg;
    for k in 0..n {
        let d: f64 = (0..n).filter(|&j| j != k).map(|j| slope[k * n + j] * (c[j] - c[k])).sum();
        out.grad[idx[k]] = -alpha * d / idcg;
    }
    Ok(out)
}

/// Mean squared difference between student and teacher score margins.
///
/// The gradient covers the student scores only, laid out as
/// `[d/d student_pos..., d/d student_neg...]`.
pub fn margin_mse_loss(
    teacher_pos: &[f64],
    teacher_neg: &[f64],
    student_pos: &[f64],
    student_neg: &[f64],
) -> Result<LossOutput> {
    let n = student_pos.len();
    if n == 0 || [teacher_pos.len(), teacher_neg.len(), student_neg.len()].iter().any(|&l| l != n) {
        return Err(Error::Validation(format!(
            "margin lists must share a positive length, got {}/{}/{}/{}",
            teacher_pos.len(),
            teacher_neg.len(),
            n,
            student_neg.len()
        )));
    }
    let mut out = LossOutput::zero(2 * n);
    for i in 0..n {
        let diff = (student_pos[i] - student_neg[i]) - (teacher_pos[i] - teacher_neg[i]);
        out.value += diff * diff;
        out.grad[i] = 2.0 * diff / n as f64;
        out.grad[n + i] = -2.0 * diff / n as f64;
    }
    out.value /= n as f64;
    Ok(out)
}

/// Mean negative log-probability of each row's label. The gradient is
/// `(softmax - one_hot) / rows`, flattened row-major.
pub fn mlm_cross_entropy(logits: &Array2<f64>, labels: &[u32]) -> Result<LossOutput> {
    let rows = logits.nrows();
    if rows == 0 {
        return Err(Error::EmptyMask);
    }
    if labels.len() != rows {
        return Err(Error::Validation(format!("{} labels for {rows} logit rows", labels.len())));
    }
    let vocab = logits.ncols();
    let mut out = LossOutput::zero(rows * vocab);
    for (r, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        if label as usize >= vocab {
            return Err(Error::Validation(format!("label {label} outside vocabulary of {vocab}")));
        }
        let lse = log_sum_exp(row.iter().copied());
        out.value += lse - row[label as usize];
        for (v, &l) in row.iter().enumerate() {
            out.grad[r * vocab + v] = (l - lse).exp() / rows as f64;
        }
        out.grad[r * vocab + label as usize] -= 1.0 / rows as f64;
    }
    out.value /= rows as f64;
    Ok(out)
}

/// Largest relative error between `kernel`'s analytic gradient and central
/// differences at `point`; relative to `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check(kernel: impl Fn(&[f64]) -> LossOutput, point: &[f64], epsilon: f64) -> f64 {
    let analytic = kernel(point).grad;
    let mut work = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        work[i] = point[i] + epsilon;
        let up = kernel(&work).value;
        work[i] = point[i] - epsilon;
        let down = kernel(&work).value;
        work[i] = point[i];
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// The four ranking objectives, by canonical name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    RankNet,
    ListNet,
    ListMle,
    ApproxNdcg,
}

impl LossName {
    pub const ALL: [LossName; 4] =
        [LossName::RankNet, LossName::ListNet, LossName::ListMle, LossName::ApproxNdcg];

    pub fn as_str(self) -> &'static str {
        match self {
            LossName::RankNet => "ranknet",
            LossName::ListNet => "listnet",
            LossName::ListMle => "listmle",
            LossName::ApproxNdcg => "approxndcg",
        }
    }
}

impl fmt::Display for LossName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossName::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown loss {s:?}; expected one of: ranknet, listnet, listmle, approxndcg"
            ))
        })
    }
}

/// A selected ranking loss with its settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingLoss {
    pub name: LossName,
    pub approx: ApproxConfig,
}

impl RankingLoss {
    pub fn new(name: LossName, alpha: f64) -> Result<Self> {
        Ok(Self { name, approx: ApproxConfig::new(alpha)? })
    }

    pub fn compute(&self, scores: &[f64], target: &ListTarget, tie_seed: u64) -> Result<LossOutput> {
        match self.name {
            LossName::RankNet => ranknet_loss(scores, target),
            LossName::ListNet => listnet_loss(scores, target),
            LossName::ListMle => listmle_loss(scores, target, tie_seed),
            LossName::ApproxNdcg => approxndcg_loss(scores, target, self.approx),
        }
    }
}
