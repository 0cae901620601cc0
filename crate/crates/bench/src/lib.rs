//! Shared fixtures for the criterion benchmarks in `benches/`.

use listrank::dataset::{generate_synthetic, Dataset, RelevanceGrade, SyntheticSpec};
use listrank::encoder::EncoderConfig;
use listrank::serve::{precompute_embeddings, EmbeddingStore};
use listrank::tokenizer::Tokenizer;
use listrank::training::Checkpoint;

/// An untrained desk-scale model over a small synthetic catalog. Latency
/// does not depend on the weights, so the same checkpoint serves as teacher
/// and student.
pub struct Fixture {
    pub dataset: Dataset,
    pub model: Checkpoint,
    pub store: EmbeddingStore,
}

pub fn fixture(n_queries: usize, list_size: usize) -> Fixture {
    let spec = SyntheticSpec { n_queries, list_size, ..Default::default() };
    let dataset = generate_synthetic(&spec).expect("valid spec");
    let tok = Tokenizer::train(&dataset.texts(), 2000).expect("non-empty corpus");
    let model = Checkpoint::init(&EncoderConfig::desk(tok.vocab_size()), tok, 0).expect("valid config");
    let store = precompute_embeddings(&model, &dataset.catalog()).expect("unique ids");
    Fixture { dataset, model, store }
}

/// Deterministic scores and grades for kernel benchmarks.
pub fn score_list(n: usize) -> (Vec<f64>, Vec<RelevanceGrade>) {
    let scores = (0..n).map(|i| ((i * 7919) % 101) as f64 / 25.0 - 2.0).collect();
    let grades = (0..n).map(|i| RelevanceGrade::new(((i * 31) % 5) as u8).expect("in range")).collect();
    (scores, grades)
}
