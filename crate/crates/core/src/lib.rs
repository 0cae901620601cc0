//! Learning-to-rank engine built from scratch.
//!
//! A byte-level BPE tokenizer feeds a small post-norm transformer encoder
//! with hand-written backpropagation. The encoder is trained as a
//! cross-encoder under pairwise and listwise ranking losses, optionally
//! after masked-language-model pre-training. It is then distilled into a
//! weight-shared bi-encoder whose document embeddings can be precomputed
//! for dot-product ranking.

pub mod dataset;
pub mod encoder;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod error;
pub mod serve;
pub mod tokenizer;
pub mod training;
mod util;

pub use error::{Error, Result};
pub use util::{derive_seed, hash64, write_atomic};
