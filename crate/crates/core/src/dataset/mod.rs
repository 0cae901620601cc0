//! Query groups with graded relevance: click-log ingestion, synthetic
//! generation, file I/O and summary statistics.

mod ctr;
mod io;
mod stats;
mod synthetic;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ctr::{grade_from_ctr, ingest_click_log, ClickRecord};
pub use io::{load_dataset, parse_dataset, save_dataset, serialize_dataset};
pub use stats::{dataset_stats, DatasetStats};
pub use synthetic::{attribute_word, generate_synthetic, overlap_grade, SyntheticSpec};

/// Default cap on the number of candidates kept per query.
pub const DEFAULT_RESULT_CAP: usize = 30;
/// Default minimum impressions for a click record to be graded.
pub const DEFAULT_MIN_IMPRESSIONS: u64 = 50;

/// Integer relevance label in `0..=4`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct RelevanceGrade(u8);

impl RelevanceGrade {
    pub const MAX: u8 = 4;

    pub fn new(value: u8) -> Result<Self> {
        if value > Self::MAX {
            return Err(Error::Validation(format!(
                "relevance grade {value} outside [0, {}]",
                Self::MAX
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Exponential gain `2^grade - 1` used by DCG.
    pub fn gain(self) -> f64 {
        f64::from((1u32 << self.0) - 1)
    }
}

impl TryFrom<u8> for RelevanceGrade {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        Self::new(value)
    }
}

impl From<RelevanceGrade> for u8 {
    fn from(g: RelevanceGrade) -> u8 {
        g.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let doc_id = doc_id.into();
        if doc_id.is_empty() {
            return Err(Error::Validation("empty doc_id".into()));
        }
        Ok(Self { doc_id, text: text.into() })
    }
}

/// One query, its candidate documents and their aligned grades.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryGroup {
    query_id: String,
    query_text: String,
    docs: Vec<Document>,
    grades: Vec<RelevanceGrade>,
}

impl QueryGroup {
    pub fn new(
        query_id: impl Into<String>,
        query_text: impl Into<String>,
        docs: Vec<Document>,
        grades: Vec<RelevanceGrade>,
    ) -> Result<Self> {
        let query_id = query_id.into();
        if docs.is_empty() {
            return Err(Error::EmptyGroup(Some(query_id)));
        }
        if docs.len() != grades.len() {
            return Err(Error::Validation(format!(
                "query {query_id:?}: {} docs but {} grades",
                docs.len(),
                grades.len()
            )));
        }
        Ok(Self { query_id, query_text: query_text.into(), docs, grades })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn query_text(&self) -> &str {
        &self.query_text
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn grades(&self) -> &[RelevanceGrade] {
        &self.grades
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    groups: Vec<QueryGroup>,
}

impl Dataset {
    pub fn new(groups: Vec<QueryGroup>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(groups.len());
        for g in &groups {
            if !seen.insert(g.query_id.as_str()) {
                return Err(Error::Validation(format!("duplicate query_id {:?}", g.query_id)));
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[QueryGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Splits into the first `n` groups and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.groups.len());
        (
            Dataset { groups: self.groups[..n].to_vec() },
            Dataset { groups: self.groups[n..].to_vec() },
        )
    }

    /// Every distinct document across all groups, in first-seen order.
    pub fn catalog(&self) -> Vec<Document> {
        let mut seen = HashSet::new();
        self.groups
            .iter()
            .flat_map(|g| g.docs.iter())
            .filter(|d| seen.insert(d.doc_id.clone()))
            .cloned()
            .collect()
    }

    /// All query and document texts, suitable as a tokenizer corpus.
    pub fn texts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for g in &self.groups {
            out.push(g.query_text.clone());
            out.extend(g.docs.iter().map(|d| d.text.clone()));
        }
        out
    }
}
