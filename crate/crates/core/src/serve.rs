//! Query-time ranking: precomputed bi-encoder document embeddings scored
//! by dot product, the cross-encoder path for comparison, and a latency
//! benchmark of the two.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::dataset::{Dataset, Document};
use crate::error::{Error, Result};
use crate::metrics::rank_order;
use crate::training::{embed_texts, score_documents, Checkpoint};
use crate::util::{hash64, nearest_rank, read_file, rng, write_atomic};

pub const STORE_MAGIC: &[u8; 8] = b"LRNKEMBS";
pub const STORE_VERSION: u32 = 1;
/// Queries run before timing starts.
pub const WARMUP_QUERIES: usize = 10;
pub const MIN_BENCH_QUERIES: usize = 30;
const EMBED_CHUNK: usize = 64;

/// Document embeddings at 32-bit precision, keyed by `doc_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    fingerprint: u64,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f32>,
}

impl EmbeddingStore {
    fn from_parts(dim: usize, fingerprint: u64, ids: Vec<String>, vectors: Vec<f32>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate doc_id {id:?}")));
            }
        }
        debug_assert_eq!(vectors.len(), dim * ids.len());
        Ok(Self { dim, fingerprint, ids, index, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Payload hash of the student checkpoint that produced the vectors.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, doc_id: &str) -> Option<&[f32]> {
        self.index.get(doc_id).map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Layout: magic, `u32` version, `u32` dim, `u64` count, `u64`
    /// fingerprint, then per document a `u32` id length, the UTF-8 id and a
    /// `u64` byte offset into the vector block, then the vectors as
    /// little-endian `f32`, then a `u64` hash of all preceding bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(36 + self.ids.len() * 24 + 4 * self.vectors.len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&((i * self.dim * 4) as u64).to_le_bytes());
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let h = hash64(&out);
        out.extend_from_slice(&h.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != STORE_MAGIC {
            return Err(Error::CorruptHeader("missing embedding store magic".into()));
        }
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::Version { found: version, supported: STORE_VERSION });
        }
        if bytes.len() < 8 {
            return Err(Error::Truncated { expected: 8, found: bytes.len() });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = hash64(body);
        if stored != computed {
            return Err(Error::Integrity { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let dim = r.u32()? as usize;
        let count = usize::try_from(r.u64()?).map_err(|_| Error::CorruptHeader("count overflows".into()))?;
        let fingerprint = r.u64()?;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for i in 0..count {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptHeader(format!("doc id {i} is not UTF-8")))?
                .to_string();
            if r.u64()? != (i * dim * 4) as u64 {
                return Err(Error::CorruptHeader(format!("offset of doc id {i} is inconsistent")));
            }
            ids.push(id);
        }
        let block = r.take(count * dim * 4)?;
        if r.pos != body.len() {
            return Err(Error::CorruptHeader(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let vectors = block.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_parts(dim, fingerprint, ids, vectors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated { expected: self.pos.saturating_add(n), found: self.bytes.len() });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn embed_documents_f32(student: &Checkpoint, docs: &[Document]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(docs.len() * student.config().model_dim);
    for chunk in docs.chunks(EMBED_CHUNK) {
        let texts: Vec<&str> = chunk.iter().map(|d| d.text.as_str()).collect();
        let emb = embed_texts(student.params(), student.tokenizer(), &texts)?;
        out.extend(emb.iter().map(|&x| x as f32));
    }
    Ok(out)
}

/// Embeds every catalog document with the student.
pub fn precompute_embeddings(student: &Checkpoint, catalog: &[Document]) -> Result<EmbeddingStore> {
    let ids = catalog.iter().map(|d| d.doc_id.clone()).collect();
    let vectors = embed_documents_f32(student, catalog)?;
    EmbeddingStore::from_parts(student.config().model_dim, student.payload_hash(), ids, vectors)
}

/// Documents in ranked order with their scores, and the time taken.
#[derive(Clone, Debug, PartialEq)]
pub struct RankResult {
    pub ranking: Vec<(String, f64)>,
    pub latency_ms: f64,
}

impl RankResult {
    fn from_scores(ids: Vec<String>, scores: Vec<f64>, started: Instant) -> Self {
        let order = rank_order(&ids, &scores);
        let ranking = order.into_iter().map(|i| (ids[i].clone(), scores[i])).collect();
        Self { ranking, latency_ms: started.elapsed().as_secs_f64() * 1e3 }
    }
}

fn dot(q: &[f64], d: &[f32]) -> f64 {
    q.iter().zip(d).map(|(a, &b)| a * f64::from(b)).sum()
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Validation(format!("duplicate candidate {id:?}")));
        }
    }
    Ok(())
}

/// A student checkpoint paired with a store it produced.
pub struct StudentRanker<'a> {
    student: &'a Checkpoint,
    store: &'a EmbeddingStore,
}

impl<'a> StudentRanker<'a> {
    pub fn new(student: &'a Checkpoint, store: &'a EmbeddingStore) -> Result<Self> {
        if store.fingerprint() != student.payload_hash() || store.dim() != student.config().model_dim {
            return Err(Error::Validation("embedding store was not built by this student checkpoint".into()));
        }
        Ok(Self { student, store })
    }

    /// Scores candidates by dot product with the query embedding. The
    /// timed span covers query embedding, scoring and sorting.
    pub fn rank(&self, query: &str, candidate_ids: &[&str]) -> Result<RankResult> {
        check_unique(candidate_ids.iter().copied())?;
        let mut missing: Vec<String> =
            candidate_ids.iter().filter(|id| self.store.get(id).is_none()).map(|id| id.to_string()).collect();
        if !missing.is_empty() {
            missing.sort();
            return Err(Error::Lookup { kind: "document", missing });
        }
        let started = Instant::now();
        let q = embed_texts(self.student.params(), self.student.tokenizer(), &[query])?;
        let q = q.as_slice().expect("contiguous embedding");
        let scores = candidate_ids.iter().map(|id| dot(q, self.store.get(id).unwrap())).collect();
        Ok(RankResult::from_scores(candidate_ids.iter().map(|s| s.to_string()).collect(), scores, started))
    }
}

pub fn rank_with_student(
    student: &Checkpoint,
    store: &EmbeddingStore,
    query: &str,
    candidate_ids: &[&str],
) -> Result<RankResult> {
    StudentRanker::new(student, store)?.rank(query, candidate_ids)
}

/// The student path without a store: documents are embedded on the spot
/// and rounded to the store's precision, so scores match the stored path.
pub fn rank_with_student_uncached(student: &Checkpoint, query: &str, docs: &[Document]) -> Result<RankResult> {
    check_unique(docs.iter().map(|d| d.doc_id.as_str()))?;
    let started = Instant::now();
    let dim = student.config().model_dim;
    let q = embed_texts(student.params(), student.tokenizer(), &[query])?;
    let q = q.as_slice().expect("contiguous embedding");
    let vectors = embed_documents_f32(student, docs)?;
    let scores = vectors.chunks_exact(dim.max(1)).map(|d| dot(q, d)).collect();
    Ok(RankResult::from_scores(docs.iter().map(|d| d.doc_id.clone()).collect(), scores, started))
}

/// Cross-encoder ranking, one forward pass over all pairs.
pub fn rank_with_teacher(teacher: &Checkpoint, query: &str, docs: &[Document]) -> Result<RankResult> {
    check_unique(docs.iter().map(|d| d.doc_id.as_str()))?;
    let started = Instant::now();
    let scores = score_documents(teacher.params(), teacher.tokenizer(), query, docs)?;
    Ok(RankResult::from_scores(docs.iter().map(|d| d.doc_id.clone()).collect(), scores, started))
}

/// One benchmark query with its candidate documents.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchQuery {
    pub query: String,
    pub docs: Vec<Document>,
}

/// Seeded workload: each query is a random group's query text with
/// `list_size` distinct documents drawn from the catalog, preferring the
/// group's own documents.
pub fn make_workload(dataset: &Dataset, n_queries: usize, list_size: usize, seed: u64) -> Result<Vec<BenchQuery>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let catalog = dataset.catalog();
    if list_size == 0 || list_size > catalog.len() {
        return Err(Error::Config(format!("list size must lie in 1..={}, got {list_size}", catalog.len())));
    }
    let mut rng = rng(seed);
    let mut out = Vec::with_capacity(n_queries);
    for _ in 0..n_queries {
        let group = dataset.groups().choose(&mut rng).expect("non-empty dataset");
        let mut docs: Vec<Document> = group.docs().to_vec();
        let mut seen: HashSet<String> = docs.iter().map(|d| d.doc_id.clone()).collect();
        docs.retain({
            let mut dup = HashSet::new();
            move |d| dup.insert(d.doc_id.clone())
        });
        while docs.len() < list_size {
            let d = &catalog[rng.random_range(0..catalog.len())];
            if seen.insert(d.doc_id.clone()) {
                docs.push(d.clone());
            }
        }
        while docs.len() > list_size {
            docs.swap_remove(rng.random_range(0..docs.len()));
        }
        out.push(BenchQuery { query: group.query_text().to_string(), docs });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemLatency {
    pub system: String,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub speedup_vs_teacher: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub teacher: SystemLatency,
    pub student: SystemLatency,
}

pub const BENCH_HEADER: &str = "system,mean_ms,median_ms,p90_ms,speedup_vs_teacher";

impl LatencyReport {
    pub fn speedup(&self) -> f64 {
        self.student.speedup_vs_teacher
    }

    pub fn csv(&self) -> String {
        let mut out = format!("{BENCH_HEADER}\n");
        for s in [&self.teacher, &self.student] {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                s.system, s.mean_ms, s.median_ms, s.p90_ms, s.speedup_vs_teacher
            ));
        }
        out
    }
}

fn summarize(system: &str, mut times: Vec<f64>, teacher_mean: Option<f64>) -> SystemLatency {
    times.sort_by(f64::total_cmp);
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    SystemLatency {
        system: system.into(),
        mean_ms,
        median_ms: nearest_rank(&times, 50.0).unwrap_or(f64::NAN),
        p90_ms: nearest_rank(&times, 90.0).unwrap_or(f64::NAN),
        speedup_vs_teacher: teacher_mean.map_or(1.0, |t| t / mean_ms),
    }
}

/// Times both systems on the same queries, alternating per query. The
/// first [`WARMUP_QUERIES`] entries of `workload` are run but not timed.
pub fn benchmark_latency(
    teacher: &Checkpoint,
    student: &Checkpoint,
    store: &EmbeddingStore,
    workload: &[BenchQuery],
) -> Result<LatencyReport> {
    let timed = workload.len().saturating_sub(WARMUP_QUERIES);
    if timed < MIN_BENCH_QUERIES {
        return Err(Error::Config(format!(
            "benchmark needs at least {MIN_BENCH_QUERIES} timed queries after {WARMUP_QUERIES} warm-up, got {timed}"
        )));
    }
    let ranker = StudentRanker::new(student, store)?;
    let (mut t_times, mut s_times) = (Vec::with_capacity(timed), Vec::with_capacity(timed));
    for (i, q) in workload.iter().enumerate() {
        let ids: Vec<&str> = q.docs.iter().map(|d| d.doc_id.as_str()).collect();
        let t = rank_with_teacher(teacher, &q.query, &q.docs)?;
        let s = ranker.rank(&q.query, &ids)?;
        if i >= WARMUP_QUERIES {
            t_times.push(t.latency_ms);
            s_times.push(s.latency_ms);
        }
    }
    let teacher_row = summarize("teacher", t_times, None);
    let student_row = summarize("student", s_times, Some(teacher_row.mean_ms));
    Ok(LatencyReport { teacher: teacher_row, student: student_row })
}

/// Builds a workload of `n_queries` timed queries (plus warm-up) from
/// `dataset` and benchmarks it.
pub fn benchmark_on_dataset(
    teacher: &Checkpoint,
    student: &Checkpoint,
    store: &EmbeddingStore,
    dataset: &Dataset,
    n_queries: usize,
    list_size: usize,
    seed: u64,
) -> Result<LatencyReport> {
    let workload = make_workload(dataset, n_queries + WARMUP_QUERIES, list_size, seed)?;
    benchmark_latency(teacher, student, store, &workload)
}
