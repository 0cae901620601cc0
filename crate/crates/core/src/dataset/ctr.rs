use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{Dataset, Document, QueryGroup, RelevanceGrade};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClickRecord {
    pub query_id: String,
    pub doc_id: String,
    pub clicks: u64,
    pub impressions: u64,
}

impl ClickRecord {
    pub fn new(
        query_id: impl Into<String>,
        doc_id: impl Into<String>,
        clicks: u64,
        impressions: u64,
    ) -> Self {
        Self { query_id: query_id.into(), doc_id: doc_id.into(), clicks, impressions }
    }

    fn validate(&self) -> Result<()> {
        if self.clicks > self.impressions {
            return Err(Error::Validation(format!(
                "query {:?} doc {:?}: {} clicks exceed {} impressions",
                self.query_id, self.doc_id, self.clicks, self.impressions
            )));
        }
        Ok(())
    }

    /// CTR as an exact fraction; zero impressions count as zero CTR.
    fn ctr(&self) -> (u128, u128) {
        if self.impressions == 0 {
            (0, 1)
        } else {
            (u128::from(self.clicks), u128::from(self.impressions))
        }
    }
}

fn cmp_fraction((an, ad): (u128, u128), (bn, bd): (u128, u128)) -> Ordering {
    (an * bd).cmp(&(bn * ad))
}

/// Grades one query's records as `ceil(4 * ctr / max_ctr)`.
///
/// Records below `min_impressions` are dropped first; the result is aligned
/// with the surviving records. Arithmetic is exact over the integer counts,
/// so the grades are invariant to scaling clicks and impressions together.
/// A query where every CTR is zero grades every record 0.
pub fn grade_from_ctr(
    records: &[ClickRecord],
    min_impressions: u64,
) -> Result<Vec<(&ClickRecord, RelevanceGrade)>> {
    let Some(first) = records.first() else {
        return Err(Error::EmptyGroup(None));
    };
    for r in records {
        r.validate()?;
        if r.query_id != first.query_id {
            return Err(Error::Validation(format!(
                "records span queries {:?} and {:?}",
                first.query_id, r.query_id
            )));
        }
    }
    let surviving: Vec<&ClickRecord> =
        records.iter().filter(|r| r.impressions >= min_impressions).collect();
    if surviving.is_empty() {
        return Err(Error::EmptyGroup(Some(first.query_id.clone())));
    }
    let max = surviving
        .iter()
        .map(|r| r.ctr())
        .max_by(|a, b| cmp_fraction(*a, *b))
        .expect("non-empty");
    Ok(surviving
        .into_iter()
        .map(|r| {
            let grade = if max.0 == 0 {
                0
            } else {
                // ceil(4 * (cn/cd) / (mn/md)) = ceil(4*cn*md / (cd*mn))
                let (cn, cd) = r.ctr();
                let num = 4 * cn * max.1;
                let den = cd * max.0;
                num.div_ceil(den) as u8
            };
            (r, RelevanceGrade(grade))
        })
        .collect())
}

/// Builds a dataset from raw click logs.
///
/// Per query: records under `min_impressions` are filtered, the remainder is
/// truncated to `result_cap` by descending impressions (ties by doc id), and
/// the kept records are graded with [`grade_from_ctr`]. Queries with no
/// surviving record are dropped. Groups come out sorted by query id.
pub fn ingest_click_log(
    records: &[ClickRecord],
    docs: &HashMap<String, Document>,
    queries: &HashMap<String, String>,
    min_impressions: u64,
    result_cap: usize,
) -> Result<Dataset> {
    if result_cap == 0 {
        return Err(Error::Config("result cap must be at least 1".into()));
    }
    let missing_docs: BTreeSet<&str> = records
        .iter()
        .filter(|r| !docs.contains_key(&r.doc_id))
        .map(|r| r.doc_id.as_str())
        .collect();
    if !missing_docs.is_empty() {
        return Err(Error::Lookup {
            kind: "document",
            missing: missing_docs.into_iter().map(String::from).collect(),
        });
    }
    let missing_queries: BTreeSet<&str> = records
        .iter()
        .filter(|r| !queries.contains_key(&r.query_id))
        .map(|r| r.query_id.as_str())
        .collect();
    if !missing_queries.is_empty() {
        return Err(Error::Lookup {
            kind: "query",
            missing: missing_queries.into_iter().map(String::from).collect(),
        });
    }

    let mut by_query: BTreeMap<&str, Vec<ClickRecord>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        by_query.entry(&r.query_id).or_default().push(r.clone());
    }

    let mut groups = Vec::new();
    for (query_id, mut recs) in by_query {
        recs.retain(|r| r.impressions >= min_impressions);
        if recs.is_empty() {
            continue;
        }
        recs.sort_by(|a, b| b.impressions.cmp(&a.impressions).then_with(|| a.doc_id.cmp(&b.doc_id)));
        recs.truncate(result_cap);
        let graded = grade_from_ctr(&recs, min_impressions)?;
        let (group_docs, grades) = graded
            .into_iter()
            .map(|(r, g)| (docs[&r.doc_id].clone(), g))
            .unzip();
        groups.push(QueryGroup::new(query_id, queries[query_id].clone(), group_docs, grades)?);
    }
    Dataset::new(groups)
}
