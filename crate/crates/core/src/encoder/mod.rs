//! Post-norm transformer encoder with explicit forward and backward passes.
//!
//! Several sequences can be run in one call: their tokens are stacked as
//! rows of a single matrix so the dense layers run as one matrix product,
//! while attention stays within each sequence.

mod backward;
mod forward;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamGroups;
use crate::util::rng;

pub use backward::{backward, backward_embeddings, backward_mlm, backward_scores};
pub use forward::{embed_text, forward, mlm_logits, score_cls, ForwardTrace};

/// Standard deviation of the initial weight distribution.
pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// How a sequence is reduced to a single embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Hidden state of the first (`CLS`) position.
    #[default]
    Cls,
    /// Mean over attended positions.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

impl EncoderConfig {
    /// Small configuration that trains on one CPU in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            model_dim: 64,
            ffn_dim: 256,
            vocab_size,
            max_len: 64,
            pooling: Pooling::Cls,
        }
    }

    /// The production-scale shape (6 layers, 12 heads, width 768, 512
    /// tokens, 30k vocabulary). Documented for reference; far too large to
    /// train with this crate.
    pub fn production_scale() -> Self {
        Self {
            n_layers: 6,
            n_heads: 12,
            model_dim: 768,
            ffn_dim: 3072,
            vocab_size: 30_000,
            max_len: 512,
            pooling: Pooling::Cls,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("n_heads", self.n_heads),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = nonzero.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be at least 1")));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    /// Keys carry no bias: softmax is invariant to the per-query constant it would add.
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        let m = || Array2::zeros((d, d));
        let v = || Array1::zeros(d);
        Self {
            wq: m(),
            bq: v(),
            wk: m(),
            wv: m(),
            bv: v(),
            wo: m(),
            bo: v(),
            ln1_gamma: v(),
            ln1_beta: v(),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: v(),
            ln2_gamma: v(),
            ln2_beta: v(),
        }
    }
}

/// All weights. The masked-LM output projection is tied to `token_emb`;
/// only its bias is separate.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub score_w: Array1<f64>,
    pub score_b: Array1<f64>,
    pub mlm_bias: Array1<f64>,
}

impl EncoderParams {
    /// All-zero tensors shaped for `config`; also the gradient accumulator.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.model_dim;
        Self {
            config: config.clone(),
            token_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_len, d)),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(d, config.ffn_dim)).collect(),
            score_w: Array1::zeros(d),
            score_b: Array1::zeros(1),
            mlm_bias: Array1::zeros(config.vocab_size),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Adds `scale * other` into `self`.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for ((_, dst), (_, src)) in self.groups_mut().into_iter().zip(other.groups()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, g) in self.groups_mut() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Shapes of every group in canonical order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("token_emb".to_string(), self.token_emb.shape().to_vec()),
            ("pos_emb".to_string(), self.pos_emb.shape().to_vec()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let shapes: [(&str, &[usize]); 15] = [
                ("wq", l.wq.shape()),
                ("bq", l.bq.shape()),
                ("wk", l.wk.shape()),
                ("wv", l.wv.shape()),
                ("bv", l.bv.shape()),
                ("wo", l.wo.shape()),
                ("bo", l.bo.shape()),
                ("ln1_gamma", l.ln1_gamma.shape()),
                ("ln1_beta", l.ln1_beta.shape()),
                ("w1", l.w1.shape()),
                ("b1", l.b1.shape()),
                ("w2", l.w2.shape()),
                ("b2", l.b2.shape()),
                ("ln2_gamma", l.ln2_gamma.shape()),
                ("ln2_beta", l.ln2_beta.shape()),
            ];
            out.extend(shapes.iter().map(|(n, s)| (format!("layers.{i}.{n}"), s.to_vec())));
        }
        out.push(("score_w".to_string(), self.score_w.shape().to_vec()));
        out.push(("score_b".to_string(), self.score_b.shape().to_vec()));
        out.push(("mlm_bias".to_string(), self.mlm_bias.shape().to_vec()));
        out
    }
}

macro_rules! groups_impl {
    ($self:ident, $as_slice:ident, $iter:ident) => {{
        let mut out = Vec::with_capacity(5 + 15 * $self.layers.len());
        out.push(("token_emb".to_string(), $self.token_emb.$as_slice().unwrap()));
        out.push(("pos_emb".to_string(), $self.pos_emb.$as_slice().unwrap()));
        for (i, l) in $self.layers.$iter().enumerate() {
            let LayerParams {
                wq, bq, wk, wv, bv, wo, bo, ln1_gamma, ln1_beta, w1, b1, w2, b2, ln2_gamma, ln2_beta,
            } = l;
            out.push((format!("layers.{i}.wq"), wq.$as_slice().unwrap()));
            out.push((format!("layers.{i}.bq"), bq.$as_slice().unwrap()));
            out.push((format!("layers.{i}.wk"), wk.$as_slice().unwrap()));
            out.push((format!("layers.{i}.wv"), wv.$as_slice().unwrap()));
            out.push((format!("layers.{i}.bv"), bv.$as_slice().unwrap()));
            out.push((format!("layers.{i}.wo"), wo.$as_slice().unwrap()));
            out.push((format!("layers.{i}.bo"), bo.$as_slice().unwrap()));
            out.push((format!("layers.{i}.ln1_gamma"), ln1_gamma.$as_slice().unwrap()));
            out.push((format!("layers.{i}.ln1_beta"), ln1_beta.$as_slice().unwrap()));
            out.push((format!("layers.{i}.w1"), w1.$as_slice().unwrap()));
            out.push((format!("layers.{i}.b1"), b1.$as_slice().unwrap()));
            out.push((format!("layers.{i}.w2"), w2.$as_slice().unwrap()));
            out.push((format!("layers.{i}.b2"), b2.$as_slice().unwrap()));
            out.push((format!("layers.{i}.ln2_gamma"), ln2_gamma.$as_slice().unwrap()));
            out.push((format!("layers.{i}.ln2_beta"), ln2_beta.$as_slice().unwrap()));
        }
        out.push(("score_w".to_string(), $self.score_w.$as_slice().unwrap()));
        out.push(("score_b".to_string(), $self.score_b.$as_slice().unwrap()));
        out.push(("mlm_bias".to_string(), $self.mlm_bias.$as_slice().unwrap()));
        out
    }};
}

impl ParamGroups for EncoderParams {
    fn groups(&self) -> Vec<(String, &[f64])> {
        groups_impl!(self, as_slice, iter)
    }

    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        groups_impl!(self, as_slice_mut, iter_mut)
    }
}

/// Weights from `normal(0, 0.02)`, biases zero, layer-norm scale one.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = rng(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut fill = |a: &mut [f64]| a.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
    let mut p = EncoderParams::zeros(config);
    fill(p.token_emb.as_slice_mut().unwrap());
    fill(p.pos_emb.as_slice_mut().unwrap());
    for l in &mut p.layers {
        for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
            fill(w.as_slice_mut().unwrap());
        }
        l.ln1_gamma.fill(1.0);
        l.ln2_gamma.fill(1.0);
    }
    fill(p.score_w.as_slice_mut().unwrap());
    Ok(p)
}

#[cfg(test)]
mod tests;
