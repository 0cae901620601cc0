use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{EncoderParams, LayerParams, Pooling, LN_EPS};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, CLS};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub(super) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(super) struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let inv = *r;
        row.mapv_inplace(|v| v * inv);
    }
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, rstd })
}

pub(super) struct LayerTrace {
    pub x_in: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Attention probabilities, indexed `segment * n_heads + head`.
    pub probs: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
    pub ln1: LnCache,
    pub h: Array2<f64>,
    pub f1: Array2<f64>,
    pub g: Array2<f64>,
    pub ln2: LnCache,
}

/// Activations cached by one [`forward`] call, sufficient for [`super::backward`].
pub struct ForwardTrace {
    pub(super) segments: Vec<(usize, usize)>,
    pub(super) ids: Vec<u32>,
    pub(super) positions: Vec<usize>,
    pub(super) mask: Vec<u8>,
    pub(super) layers: Vec<LayerTrace>,
    pub(super) hidden: Array2<f64>,
    pub(super) model_dim: usize,
}

impl ForwardTrace {
    /// Final hidden states, one row per token across all sequences.
    pub fn hidden(&self) -> &Array2<f64> {
        &self.hidden
    }

    /// `(first row, length)` of each input sequence within [`Self::hidden`].
    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn num_rows(&self) -> usize {
        self.ids.len()
    }
}

fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    segments: &[(usize, usize)],
    mask: &[u8],
    n_heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(segments.len() * n_heads);
    for &(start, len) in segments {
        let keep = &mask[start..start + len];
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![start..start + len, cols.clone()]);
            let ks = k.slice(s![start..start + len, cols.clone()]);
            let vs = v.slice(s![start..start + len, cols.clone()]);
            let mut p = qs.dot(&ks.t());
            for mut row in p.rows_mut() {
                let max = row
                    .iter()
                    .zip(keep)
                    .filter(|(_, &m)| m != 0)
                    .map(|(&x, _)| x * scale)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (x, &m) in row.iter_mut().zip(keep) {
                    *x = if m != 0 { (*x * scale - max).exp() } else { 0.0 };
                    total += *x;
                }
                if total > 0.0 {
                    row.mapv_inplace(|x| x / total);
                }
            }
            ctx.slice_mut(s![start..start + len, cols]).assign(&p.dot(&vs));
            probs.push(p);
        }
    }
    (ctx, probs)
}

fn layer_forward(
    lp: &LayerParams,
    x: Array2<f64>,
    segments: &[(usize, usize)],
    mask: &[u8],
    n_heads: usize,
) -> (Array2<f64>, LayerTrace) {
    let q = x.dot(&lp.wq) + &lp.bq;
    let k = x.dot(&lp.wk);
    let v = x.dot(&lp.wv) + &lp.bv;
    let (ctx, probs) = attention(&q, &k, &v, segments, mask, n_heads);
    let u1 = ctx.dot(&lp.wo) + &lp.bo + &x;
    let (h, ln1) = layer_norm(&u1, &lp.ln1_gamma, &lp.ln1_beta);
    let f1 = h.dot(&lp.w1) + &lp.b1;
    let g = f1.mapv(gelu);
    let u2 = g.dot(&lp.w2) + &lp.b2 + &h;
    let (y, ln2) = layer_norm(&u2, &lp.ln2_gamma, &lp.ln2_beta);
    (y, LayerTrace { x_in: x, q, k, v, probs, ctx, ln1, h, f1, g, ln2 })
}

/// Runs the encoder over one or more sequences.
///
/// Returns hidden states stacked in input order (one row per token) and the
/// trace for backpropagation. Keys with `attention_mask == 0` receive zero
/// attention weight.
pub fn forward(params: &EncoderParams, seqs: &[TokenSequence]) -> Result<(Array2<f64>, ForwardTrace)> {
    let cfg = &params.config;
    let total: usize = seqs.iter().map(TokenSequence::len).sum();
    let mut segments = Vec::with_capacity(seqs.len());
    let mut ids = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    let mut mask = Vec::with_capacity(total);
    for (i, seq) in seqs.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::Validation(format!("sequence {i} is empty")));
        }
        if seq.len() > cfg.max_len {
            return Err(Error::Validation(format!(
                "sequence {i} has {} tokens, max_len is {}",
                seq.len(),
                cfg.max_len
            )));
        }
        if seq.attention_mask.len() != seq.len() {
            return Err(Error::Validation(format!("sequence {i} mask length mismatch")));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        segments.push((ids.len(), seq.len()));
        ids.extend_from_slice(&seq.ids);
        positions.extend(0..seq.len());
        mask.extend_from_slice(&seq.attention_mask);
    }

    let mut x = Array2::zeros((total, cfg.model_dim));
    for (r, mut row) in x.rows_mut().into_iter().enumerate() {
        row.assign(&params.token_emb.row(ids[r] as usize));
        row += &params.pos_emb.row(positions[r]);
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (y, trace) = layer_forward(lp, x, &segments, &mask, cfg.n_heads);
        layers.push(trace);
        x = y;
    }
    let trace = ForwardTrace {
        segments,
        ids,
        positions,
        mask,
        layers,
        hidden: x.clone(),
        model_dim: cfg.model_dim,
    };
    Ok((x, trace))
}

/// Relevance score per sequence: the linear score head applied to the
/// hidden state of each sequence's first (`CLS`) position.
pub fn score_cls(params: &EncoderParams, seqs: &[TokenSequence]) -> Result<(Vec<f64>, ForwardTrace)> {
    if let Some(i) = seqs.iter().position(|s| s.ids.first() != Some(&CLS)) {
        return Err(Error::Contract(format!("sequence {i} does not start with CLS")));
    }
    let (hidden, trace) = forward(params, seqs)?;
    let b = params.score_b[0];
    let scores = trace
        .segments
        .iter()
        .map(|&(start, _)| hidden.row(start).dot(&params.score_w) + b)
        .collect();
    Ok((scores, trace))
}

pub(super) fn pool(hidden: ArrayView2<f64>, trace: &ForwardTrace, pooling: Pooling) -> Array2<f64> {
    let mut out = Array2::zeros((trace.segments.len(), trace.model_dim));
    for (mut row, &(start, len)) in out.rows_mut().into_iter().zip(&trace.segments) {
        match pooling {
            Pooling::Cls => row.assign(&hidden.row(start)),
            Pooling::Mean => {
                let keep = &trace.mask[start..start + len];
                let n = keep.iter().filter(|&&m| m != 0).count().max(1) as f64;
                for (r, &m) in (start..start + len).zip(keep) {
                    if m != 0 {
                        row += &hidden.row(r);
                    }
                }
                row /= n;
            }
        }
    }
    out
}

/// One embedding row per sequence, pooled according to the config.
pub fn embed_text(params: &EncoderParams, seqs: &[TokenSequence]) -> Result<(Array2<f64>, ForwardTrace)> {
    let (hidden, trace) = forward(params, seqs)?;
    Ok((pool(hidden.view(), &trace, params.config.pooling), trace))
}

/// Vocabulary logits for the selected rows of `hidden`, through the
/// projection tied to the token embeddings.
pub fn mlm_logits(params: &EncoderParams, hidden: &Array2<f64>, rows: &[usize]) -> Result<Array2<f64>> {
    if let Some(&bad) = rows.iter().find(|&&r| r >= hidden.nrows()) {
        return Err(Error::Validation(format!(
            "position {bad} outside sequence of {} rows",
            hidden.nrows()
        )));
    }
    let selected = hidden.select(Axis(0), rows);
    Ok(selected.dot(&params.token_emb.t()) + &params.mlm_bias)
}
