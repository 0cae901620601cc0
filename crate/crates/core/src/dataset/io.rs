//! Line-delimited JSON dataset files: one query group per line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{grade_from_ctr, ClickRecord, Dataset, Document, QueryGroup, RelevanceGrade};
use crate::error::{Error, Result};
use crate::util::{read_file, write_atomic};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupLine {
    query_id: String,
    query: String,
    docs: Vec<DocLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocLine {
    doc_id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grade: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clicks: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    impressions: Option<u64>,
}

fn line_error(line: usize, err: Error) -> Error {
    match err {
        Error::Parse { .. } => err,
        other => Error::Parse { line, message: other.to_string() },
    }
}

fn group_from_line(record: GroupLine, line: usize) -> Result<QueryGroup> {
    let mut docs = Vec::with_capacity(record.docs.len());
    let mut grades = Vec::with_capacity(record.docs.len());
    let mut clicks = Vec::new();
    for d in &record.docs {
        match (d.grade, d.clicks, d.impressions) {
            (Some(g), None, None) => {
                let g = u8::try_from(g).map_err(|_| {
                    Error::Validation(format!("line {line}: grade {g} outside [0, 4]"))
                })?;
                let g = RelevanceGrade::new(g)
                    .map_err(|e| Error::Validation(format!("line {line}: {e}")))?;
                grades.push(g);
            }
            (None, Some(c), Some(n)) => {
                clicks.push(ClickRecord::new(record.query_id.clone(), d.doc_id.clone(), c, n));
            }
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "doc {:?} needs either `grade` or both `clicks` and `impressions`",
                        d.doc_id
                    ),
                })
            }
        }
        docs.push(Document::new(d.doc_id.clone(), d.text.clone()).map_err(|e| line_error(line, e))?);
    }
    if !clicks.is_empty() {
        if !grades.is_empty() {
            return Err(Error::Parse {
                line,
                message: "mixes graded and click-count documents".into(),
            });
        }
        grades = grade_from_ctr(&clicks, 0)
            .map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
                other => line_error(line, other),
            })?
            .into_iter()
            .map(|(_, g)| g)
            .collect();
    }
    QueryGroup::new(record.query_id, record.query, docs, grades).map_err(|e| line_error(line, e))
}

/// Parses dataset text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut groups = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: GroupLine = serde_json::from_str(raw)
            .map_err(|e| Error::Parse { line, message: e.to_string() })?;
        groups.push(group_from_line(record, line)?);
    }
    Dataset::new(groups)
}

pub fn serialize_dataset(dataset: &Dataset) -> String {
    let mut out = String::new();
    for g in dataset.groups() {
        let line = GroupLine {
            query_id: g.query_id().to_string(),
            query: g.query_text().to_string(),
            docs: g
                .docs()
                .iter()
                .zip(g.grades())
                .map(|(d, grade)| DocLine {
                    doc_id: d.doc_id.clone(),
                    text: d.text.clone(),
                    grade: Some(i64::from(grade.value())),
                    clicks: None,
                    impressions: None,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("dataset lines serialize"));
        out.push('\n');
    }
    out
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::Parse { line: 0, message: format!("not UTF-8: {e}") })?;
    parse_dataset(&text)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), serialize_dataset(dataset).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    #[test]
    fn roundtrip_through_file() {
        let ds = generate_synthetic(&SyntheticSpec { n_queries: 3, list_size: 5, ..Default::default() })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse_dataset("").unwrap().is_empty());
        assert!(parse_dataset("\n\n").unwrap().is_empty());
    }

    #[test]
    fn missing_docs_field_names_line() {
        let text = concat!(
            r#"{"query_id":"a","query":"x","docs":[{"doc_id":"d","text":"t","grade":1}]}"#,
            "\n",
            r#"{"query_id":"b","query":"y"}"#,
            "\n"
        );
        match parse_dataset(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("docs"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_grade_is_validation_error() {
        let text = r#"{"query_id":"a","query":"x","docs":[{"doc_id":"d","text":"t","grade":5}]}"#;
        assert!(matches!(parse_dataset(text), Err(Error::Validation(_))));
        let text = r#"{"query_id":"a","query":"x","docs":[{"doc_id":"d","text":"t","grade":-1}]}"#;
        assert!(matches!(parse_dataset(text), Err(Error::Validation(_))));
    }

    #[test]
    fn click_counts_graded_at_load() {
        let text = concat!(
            r#"{"query_id":"a","query":"x","docs":["#,
            r#"{"doc_id":"d1","text":"t","clicks":50,"impressions":100},"#,
            r#"{"doc_id":"d2","text":"t","clicks":25,"impressions":100},"#,
            r#"{"doc_id":"d3","text":"t","clicks":10,"impressions":100}]}"#
        );
        let ds = parse_dataset(text).unwrap();
        let g: Vec<u8> = ds.groups()[0].grades().iter().map(|g| g.value()).collect();
        assert_eq!(g, vec![4, 2, 1]);
    }
}
