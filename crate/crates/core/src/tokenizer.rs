//! Byte-level byte-pair encoding.
//!
//! Text is pre-split into maximal runs of whitespace and of non-whitespace,
//! and merges never cross those boundaries. Every byte has a base token, so
//! any UTF-8 string encodes and `decode(encode(s)) == s`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{hex_hash, read_file, rng, write_atomic};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;

const SPECIAL_NAMES: [&str; 5] = ["<pad>", "<cls>", "<sep>", "<mask>", "<unk>"];
pub const NUM_SPECIAL: u32 = SPECIAL_NAMES.len() as u32;
/// Specials plus one token per byte value.
pub const BASE_VOCAB: usize = NUM_SPECIAL as usize + 256;

const FILE_VERSION: u32 = 1;

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIAL
}

fn byte_token(b: u8) -> u32 {
    NUM_SPECIAL + u32::from(b)
}

/// Token ids with an aligned attention mask (1 = attend, 0 = padding).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>) -> Self {
        let attention_mask = vec![1; ids.len()];
        Self { ids, attention_mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Token id to byte string. Ids are dense; specials occupy `0..NUM_SPECIAL`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
}

impl Vocab {
    fn base() -> Self {
        let mut tokens: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()).collect();
        tokens.extend((0..=255u8).map(|b| vec![b]));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }
}

/// Ordered merges; the merge at rank `r` produces token `BASE_VOCAB + r`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(u32, u32)>,
}

impl MergeTable {
    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }
}

fn pretokenize(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        let first = rest.chars().next()?;
        let ws = first.is_whitespace();
        let end = rest
            .char_indices()
            .find(|&(_, c)| c.is_whitespace() != ws)
            .map_or(rest.len(), |(i, _)| i);
        let (piece, tail) = rest.split_at(end);
        rest = tail;
        Some(piece)
    })
}

fn merge_in_place(symbols: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    *symbols = out;
}

/// Greedy most-frequent-pair BPE training.
///
/// Stops at `vocab_size` tokens or when no adjacent pair occurs twice.
/// Equal counts are broken by the lexicographically smallest
/// `(left bytes, right bytes)`. A pair whose concatenation already exists as
/// a token is never merged, so token strings stay unique.
pub fn train_bpe(corpus: &[String], vocab_size: usize) -> Result<(Vocab, MergeTable)> {
    if corpus.is_empty() {
        return Err(Error::Config("tokenizer corpus is empty".into()));
    }
    if vocab_size < BASE_VOCAB {
        return Err(Error::Config(format!(
            "vocab size {vocab_size} below the {BASE_VOCAB} byte and special tokens"
        )));
    }
    let mut piece_counts: BTreeMap<&[u8], u64> = BTreeMap::new();
    for line in corpus {
        for piece in pretokenize(line) {
            *piece_counts.entry(piece.as_bytes()).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, u64)> = piece_counts
        .into_iter()
        .map(|(bytes, n)| (bytes.iter().map(|&b| byte_token(b)).collect(), n))
        .collect();

    let mut vocab = Vocab::base();
    let mut known: HashSet<Vec<u8>> = vocab.tokens[NUM_SPECIAL as usize..].iter().cloned().collect();
    let mut merges = MergeTable::default();
    let mut forbidden: HashSet<(u32, u32)> = HashSet::new();

    while vocab.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (symbols, n) in &words {
            for w in symbols.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|(pair, n)| *n >= 2 && !forbidden.contains(pair))
            .max_by(|(pa, na), (pb, nb)| {
                na.cmp(nb).then_with(|| {
                    let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                    let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
        let Some((pair, _)) = best else { break };
        let mut bytes = vocab.tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&vocab.tokens[pair.1 as usize]);
        if !known.insert(bytes.clone()) {
            forbidden.insert(pair);
            continue;
        }
        let new_id = vocab.len() as u32;
        vocab.tokens.push(bytes);
        merges.merges.push(pair);
        for (symbols, _) in &mut words {
            merge_in_place(symbols, pair, new_id);
        }
    }
    Ok((vocab, merges))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vocab,
    merges: MergeTable,
    ranks: HashMap<(u32, u32), u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    version: u32,
    special_tokens: BTreeMap<String, u32>,
    vocab: BTreeMap<String, u32>,
    merges: Vec<[String; 2]>,
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if (0x20..0x7f).contains(&b) && b != b'\\' {
            s.push(b as char);
        } else {
            s.push_str(&format!("\\x{b:02x}"));
        }
    }
    s
}

fn unescape(s: &str) -> Result<Vec<u8>> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            let hex = s
                .get(i + 2..i + 4)
                .filter(|_| bytes.get(i + 1) == Some(&b'x'))
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| Error::Validation(format!("bad escape in token {s:?}")))?;
            out.push(hex);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Ok(out)
}

impl Tokenizer {
    pub fn train(corpus: &[String], vocab_size: usize) -> Result<Self> {
        let (vocab, merges) = train_bpe(corpus, vocab_size)?;
        Self::from_parts(vocab, merges)
    }

    pub fn from_parts(vocab: Vocab, merges: MergeTable) -> Result<Self> {
        let mut expected = Vocab::base();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.merges.iter().enumerate() {
            let len = expected.len() as u32;
            if l >= len || r >= len || is_special(l) || is_special(r) {
                return Err(Error::Validation(format!("merge {rank} references unknown tokens")));
            }
            let mut bytes = expected.tokens[l as usize].clone();
            bytes.extend_from_slice(&expected.tokens[r as usize]);
            expected.tokens.push(bytes);
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(Error::Validation(format!("duplicate merge at rank {rank}")));
            }
        }
        if expected != vocab {
            return Err(Error::Validation("vocabulary does not match merge table".into()));
        }
        Ok(Self { vocab, merges, ranks })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = piece.iter().map(|&b| byte_token(b)).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_in_place(&mut symbols, pair, BASE_VOCAB as u32 + rank);
        }
        out.extend(symbols);
    }

    /// Plain token ids for `text`, without special tokens.
    pub fn encode_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len());
        for piece in pretokenize(text) {
            self.encode_piece(piece.as_bytes(), &mut ids);
        }
        ids
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence::from_ids(self.encode_ids(text))
    }

    /// Concatenates token bytes, skipping special tokens.
    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in &seq.ids {
            let tok = self.vocab.token_bytes(id).ok_or(Error::UnknownToken(id))?;
            if !is_special(id) {
                bytes.extend_from_slice(tok);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// `[CLS] query [SEP] doc`, cut to `max_len` by trimming the document
    /// first and the query only once the document is gone.
    ///
    /// # Panics
    /// If `max_len < 4`.
    pub fn encode_pair(&self, query: &str, doc_text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 4, "pair encoding needs max_len >= 4, got {max_len}");
        let mut q = self.encode_ids(query);
        let mut d = self.encode_ids(doc_text);
        let budget = max_len - 2;
        if q.len() + d.len() > budget {
            d.truncate(budget.saturating_sub(q.len()));
            q.truncate(budget - d.len());
        }
        let mut ids = Vec::with_capacity(q.len() + d.len() + 2);
        ids.push(CLS);
        ids.extend(q);
        ids.push(SEP);
        ids.extend(d);
        TokenSequence::from_ids(ids)
    }

    /// `[CLS] text`, cut to `max_len`. Input format for the bi-encoder.
    pub fn encode_single(&self, text: &str, max_len: usize) -> TokenSequence {
        assert!(max_len >= 1, "single encoding needs max_len >= 1");
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(CLS);
        ids.extend(self.encode_ids(text));
        ids.truncate(max_len);
        TokenSequence::from_ids(ids)
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            version: FILE_VERSION,
            special_tokens: SPECIAL_NAMES.iter().zip(0..).map(|(n, i)| (n.to_string(), i)).collect(),
            vocab: self
                .vocab
                .tokens
                .iter()
                .zip(0u32..)
                .skip(NUM_SPECIAL as usize)
                .map(|(t, i)| (escape(t), i))
                .collect(),
            merges: self
                .merges
                .merges
                .iter()
                .map(|&(l, r)| {
                    [escape(&self.vocab.tokens[l as usize]), escape(&self.vocab.tokens[r as usize])]
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("tokenizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("tokenizer file: {e}")))?;
        if file.version != FILE_VERSION {
            return Err(Error::Version { found: file.version, supported: FILE_VERSION });
        }
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            if file.special_tokens.get(*name) != Some(&(i as u32)) {
                return Err(Error::Validation(format!("special token {name} must have id {i}")));
            }
        }
        if file.special_tokens.len() != SPECIAL_NAMES.len() {
            return Err(Error::Validation("unexpected special tokens".into()));
        }
        let mut by_bytes: HashMap<Vec<u8>, u32> = HashMap::with_capacity(file.vocab.len());
        let mut tokens = vec![Vec::new(); file.vocab.len() + NUM_SPECIAL as usize];
        for (name, i) in SPECIAL_NAMES.iter().zip(0..) {
            tokens[i] = name.as_bytes().to_vec();
        }
        for (tok, &id) in &file.vocab {
            let bytes = unescape(tok)?;
            let slot = tokens
                .get_mut(id as usize)
                .filter(|_| !is_special(id))
                .ok_or_else(|| Error::Validation(format!("token id {id} out of range")))?;
            *slot = bytes.clone();
            by_bytes.insert(bytes, id);
        }
        let lookup = |s: &str| -> Result<u32> {
            let bytes = unescape(s)?;
            by_bytes
                .get(&bytes)
                .copied()
                .ok_or_else(|| Error::Validation(format!("merge references unknown token {s:?}")))
        };
        let merges = file
            .merges
            .iter()
            .map(|[l, r]| Ok((lookup(l)?, lookup(r)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(Vocab { tokens }, MergeTable { merges })
    }

    /// Stable content hash of the serialized tokenizer.
    pub fn fingerprint(&self) -> String {
        hex_hash(self.to_json().as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Validation(format!("tokenizer file is not UTF-8: {e}")))?;
        Self::from_json(&text)
    }
}

/// How selected positions are corrupted for masked-language modelling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScheme {
    /// Every selected position becomes `MASK`.
    #[default]
    AlwaysMask,
    /// 80% `MASK`, 10% random token, 10% unchanged.
    Mixed,
}

/// Masked sequence plus per-position original ids (`None` = not selected).
pub type MaskedSequence = (TokenSequence, Vec<Option<u32>>);

/// Selects each attended, non-special position with probability `rate` and
/// replaces it with `MASK`.
pub fn mask_for_mlm(seq: &TokenSequence, rate: f64, seed: u64) -> Result<MaskedSequence> {
    mask_for_mlm_with(seq, rate, MaskScheme::AlwaysMask, 0, seed)
}

/// Like [`mask_for_mlm`] with a selectable corruption scheme. `vocab_size`
/// bounds the random replacement tokens of [`MaskScheme::Mixed`].
pub fn mask_for_mlm_with(
    seq: &TokenSequence,
    rate: f64,
    scheme: MaskScheme,
    vocab_size: usize,
    seed: u64,
) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("mask rate {rate} outside [0, 1]")));
    }
    if scheme == MaskScheme::Mixed && vocab_size <= NUM_SPECIAL as usize {
        return Err(Error::Config("mixed masking needs the vocabulary size".into()));
    }
    let mut rng = rng(seed);
    let mut masked = seq.clone();
    let mut labels = vec![None; seq.len()];
    for i in 0..seq.len() {
        let id = seq.ids[i];
        if is_special(id) || seq.attention_mask[i] == 0 {
            continue;
        }
        if !rng.random_bool(rate) {
            continue;
        }
        labels[i] = Some(id);
        masked.ids[i] = match scheme {
            MaskScheme::AlwaysMask => MASK,
            MaskScheme::Mixed => {
                let roll: f64 = rng.random();
                if roll < 0.8 {
                    MASK
                } else if roll < 0.9 {
                    rng.random_range(NUM_SPECIAL..vocab_size as u32)
                } else {
                    id
                }
            }
        };
    }
    Ok((masked, labels))
}
