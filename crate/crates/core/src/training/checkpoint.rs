//! Binary checkpoint format.
//!
//! Layout: the magic bytes `LRNKCKPT`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, the parameters as
//! little-endian `f32` in manifest order, and a `u64` hash of that payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{init_params, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::ParamGroups;
use crate::tokenizer::Tokenizer;
use crate::util::{hash64, read_file, write_atomic};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LRNKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Init,
    Mlm,
    CrossEncoder,
    BiEncoder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub kind: ModelKind,
    pub loss_name: Option<String>,
    /// Completed training epochs.
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    encoder: EncoderConfig,
    meta: TrainingMeta,
    tokenizer_hash: String,
    tokenizer: String,
    manifest: Vec<ManifestEntry>,
}

/// Encoder weights together with the tokenizer they were trained with.
///
/// Parameters are held at 32-bit precision (stored widened to `f64`), so
/// saving and loading reproduces them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    params: EncoderParams,
    tokenizer: Tokenizer,
    meta: TrainingMeta,
}

fn quantize(params: &mut EncoderParams) {
    for (_, g) in params.groups_mut() {
        g.iter_mut().for_each(|x| *x = f64::from(*x as f32));
    }
}

impl Checkpoint {
    pub fn new(mut params: EncoderParams, tokenizer: Tokenizer, meta: TrainingMeta) -> Result<Self> {
        params.config.validate()?;
        if tokenizer.vocab_size() != params.config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} tokens but the encoder expects {}",
                tokenizer.vocab_size(),
                params.config.vocab_size
            )));
        }
        quantize(&mut params);
        Ok(Self { params, tokenizer, meta })
    }

    /// Freshly initialized weights.
    pub fn init(config: &EncoderConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        let params = init_params(config, seed)?;
        Self::new(params, tokenizer, TrainingMeta { kind: ModelKind::Init, loss_name: None, epoch: 0, seed })
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.params.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn version(&self) -> u32 {
        CHECKPOINT_VERSION
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.params.num_values());
        for (_, g) in self.params.groups() {
            for &x in g {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    /// Hash of the parameter payload; identifies these exact weights.
    pub fn payload_hash(&self) -> u64 {
        hash64(&self.payload())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let manifest = self
            .params
            .shapes()
            .into_iter()
            .map(|(name, shape)| {
                let entry = ManifestEntry { name, offset, shape };
                offset += 4 * entry.shape.iter().product::<usize>();
                entry
            })
            .collect();
        let header = Header {
            encoder: self.params.config.clone(),
            meta: self.meta.clone(),
            tokenizer_hash: self.tokenizer.fingerprint(),
            tokenizer: self.tokenizer.to_json(),
            manifest,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload = self.payload();
        let mut out = Vec::with_capacity(28 + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&hash64(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::CorruptHeader("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, supported: CHECKPOINT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let rest = &bytes[20..];
        let header_len = usize::try_from(header_len)
            .ok()
            .filter(|&n| n <= rest.len())
            .ok_or_else(|| Error::CorruptHeader(format!("header length {header_len} exceeds file")))?;
        let header: Header = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| Error::CorruptHeader(e.to_string()))?;
        header.encoder.validate().map_err(|e| Error::CorruptHeader(e.to_string()))?;

        let mut params = EncoderParams::zeros(&header.encoder);
        let shapes = params.shapes();
        let mut offset = 0;
        if shapes.len() != header.manifest.len() {
            return Err(Error::CorruptHeader("manifest does not match encoder config".into()));
        }
        for ((name, shape), entry) in shapes.iter().zip(&header.manifest) {
            if *name != entry.name || *shape != entry.shape || entry.offset != offset {
                return Err(Error::CorruptHeader(format!("manifest entry `{}` is inconsistent", entry.name)));
            }
            offset += 4 * shape.iter().product::<usize>();
        }

        let body = &rest[header_len..];
        let expected = offset + 8;
        if body.len() < expected {
            return Err(Error::Truncated { expected, found: body.len() });
        }
        if body.len() > expected {
            return Err(Error::CorruptHeader(format!("{} trailing bytes", body.len() - expected)));
        }
        let (payload, tail) = body.split_at(offset);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = hash64(payload);
        if stored != computed {
            return Err(Error::Integrity { stored, computed });
        }
        let mut values = payload.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
        for (_, g) in params.groups_mut() {
            g.iter_mut().for_each(|x| *x = values.next().unwrap());
        }

        let tokenizer = Tokenizer::from_json(&header.tokenizer).map_err(|e| Error::CorruptHeader(e.to_string()))?;
        if tokenizer.fingerprint() != header.tokenizer_hash {
            return Err(Error::CorruptHeader("tokenizer hash mismatch".into()));
        }
        Self::new(params, tokenizer, header.meta).map_err(|e| Error::CorruptHeader(e.to_string()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Pooling;

    fn tiny() -> Checkpoint {
        let corpus = vec!["red shirt".to_string(), "blue shirt".to_string()];
        let tok = Tokenizer::train(&corpus, 270).unwrap();
        let config = EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            vocab_size: tok.vocab_size(),
            max_len: 12,
            pooling: Pooling::Cls,
        };
        Checkpoint::init(&config, tok, 3).unwrap()
    }

    #[test]
    fn roundtrip_is_identity() {
        let ck = tiny();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = tiny();
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn parameters_are_held_at_single_precision() {
        let ck = tiny();
        for (_, g) in ck.params().groups() {
            assert!(g.iter().all(|&x| f64::from(x as f32) == x));
        }
    }

    #[test]
    fn flipped_payload_byte_fails_integrity() {
        let mut bytes = tiny().to_bytes();
        let n = bytes.len();
        bytes[n - 20] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = tiny().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 9]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn older_version_is_refused() {
        let mut bytes = tiny().to_bytes();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 0, supported: 1 })
        ));
    }

    #[test]
    fn corrupt_header() {
        let mut bytes = tiny().to_bytes();
        bytes[22] = b'#';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CorruptHeader(_))));
        assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint"), Err(Error::CorruptHeader(_))));
    }

    #[test]
    fn vocabulary_mismatch_rejected() {
        let ck = tiny();
        let mut params = ck.params().clone();
        params.config.vocab_size += 1;
        assert!(Checkpoint::new(params, ck.tokenizer().clone(), ck.meta().clone()).is_err());
    }
}
