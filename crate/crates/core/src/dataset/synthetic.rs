//! Synthetic query groups whose relevance is determined by token overlap,
//! standing in for proprietary click-stream data.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Document, QueryGroup, RelevanceGrade};
use crate::error::{Error, Result};
use crate::util::rng;

const ATTRIBUTE_WORDS: &[&str] = &[
    "red", "blue", "black", "white", "green", "pink", "navy", "beige", "maroon", "olive",
    "cotton", "linen", "denim", "silk", "wool", "leather", "rayon", "velvet", "satin", "nylon",
    "shirt", "dress", "kurta", "jeans", "saree", "jacket", "skirt", "shorts", "hoodie", "blazer",
    "slim", "loose", "regular", "cropped", "printed", "striped", "checked", "solid", "floral",
    "casual", "formal", "party", "sports", "ethnic", "summer", "winter", "women", "men",
];

/// The `index`-th attribute word; indices past the built-in list get a
/// numeric suffix so every index maps to a distinct word.
pub fn attribute_word(index: usize) -> String {
    let base = ATTRIBUTE_WORDS[index % ATTRIBUTE_WORDS.len()];
    match index / ATTRIBUTE_WORDS.len() {
        0 => base.to_string(),
        n => format!("{base}{n}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_queries: usize,
    pub list_size: usize,
    pub attribute_vocab_size: usize,
    pub query_token_count: usize,
    pub doc_token_count: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_queries: 500,
            list_size: 30,
            attribute_vocab_size: 48,
            query_token_count: 3,
            doc_token_count: 5,
            noise_std: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_queries == 0 {
            return bad("n_queries must be at least 1");
        }
        if self.list_size == 0 {
            return bad("list_size must be at least 1");
        }
        if self.query_token_count == 0 || self.doc_token_count == 0 {
            return bad("query and doc token counts must be at least 1");
        }
        if self.attribute_vocab_size < self.query_token_count + self.doc_token_count {
            return bad("attribute_vocab_size must cover query_token_count + doc_token_count");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be a non-negative finite number");
        }
        Ok(())
    }
}

/// `round(4 * overlap / query_token_count + noise)` clipped to `[0, 4]`.
pub fn overlap_grade(overlap: usize, query_token_count: usize, noise: f64) -> RelevanceGrade {
    let raw = 4.0 * overlap as f64 / query_token_count as f64 + noise;
    RelevanceGrade(raw.round().clamp(0.0, 4.0) as u8)
}

/// Generates a dataset as a pure function of `spec`.
///
/// Each document is a bag of distinct attribute words. The number of query
/// words it contains is drawn uniformly so every overlap level is
/// represented; the grade is [`overlap_grade`] of that overlap.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
    let vocab: Vec<usize> = (0..spec.attribute_vocab_size).collect();
    let max_overlap = spec.query_token_count.min(spec.doc_token_count);
    let width = spec.n_queries.to_string().len();
    let doc_width = spec.list_size.to_string().len();

    let mut groups = Vec::with_capacity(spec.n_queries);
    for qi in 0..spec.n_queries {
        let query: Vec<usize> =
            vocab.choose_multiple(&mut rng, spec.query_token_count).copied().collect();
        let others: Vec<usize> = vocab.iter().copied().filter(|w| !query.contains(w)).collect();
        let query_id = format!("q{qi:0width$}");
        let mut docs = Vec::with_capacity(spec.list_size);
        let mut grades = Vec::with_capacity(spec.list_size);
        for di in 0..spec.list_size {
            let overlap = rng.random_range(0..=max_overlap);
            let mut words: Vec<usize> = query.choose_multiple(&mut rng, overlap).copied().collect();
            words.extend(others.choose_multiple(&mut rng, spec.doc_token_count - overlap));
            words.shuffle(&mut rng);
            let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let text = words.iter().map(|&w| attribute_word(w)).collect::<Vec<_>>().join(" ");
            docs.push(Document::new(format!("{query_id}-d{di:0doc_width$}"), text)?);
            grades.push(overlap_grade(overlap, spec.query_token_count, eps));
        }
        let query_text = query.iter().map(|&w| attribute_word(w)).collect::<Vec<_>>().join(" ");
        groups.push(QueryGroup::new(query_id, query_text, docs, grades)?);
    }
    Dataset::new(groups)
}
