use super::Dataset;
use crate::util::nearest_rank;

/// Median and p90 (nearest-rank) of result-set and query lengths.
/// Query length counts whitespace-separated words.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub groups: usize,
    pub list_len_median: f64,
    pub list_len_p90: f64,
    pub query_len_median: f64,
    pub query_len_p90: f64,
}

/// Returns `None` for an empty dataset.
pub fn dataset_stats(dataset: &Dataset) -> Option<DatasetStats> {
    let mut list_lens: Vec<f64> = dataset.groups().iter().map(|g| g.len() as f64).collect();
    let mut query_lens: Vec<f64> = dataset
        .groups()
        .iter()
        .map(|g| g.query_text().split_whitespace().count() as f64)
        .collect();
    list_lens.sort_by(f64::total_cmp);
    query_lens.sort_by(f64::total_cmp);
    Some(DatasetStats {
        groups: dataset.len(),
        list_len_median: nearest_rank(&list_lens, 50.0)?,
        list_len_p90: nearest_rank(&list_lens, 90.0)?,
        query_len_median: nearest_rank(&query_lens, 50.0)?,
        query_len_p90: nearest_rank(&query_lens, 90.0)?,
    })
}
