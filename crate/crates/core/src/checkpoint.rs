//! Binary checkpoint format.
//!
//! ```text
//! "GATCKPT1"
//! u64 len, config text (key=value lines, then `vocab=` with space-separated tokens)
//! per parameter, in name order:
//!     u64 len, name bytes, u64 rank, rank × u64 dims, f64 data
//! u64 CRC-64/XZ of everything above
//! ```
//! All integers and reals are little-endian.

use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use thiserror::Error;

use crate::config::{parse_kv, ModelConfig};
use crate::params::{param_specs, ModelParams};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

const MAGIC_PREFIX: &[u8; 7] = b"GATCKPT";
const VERSION: u8 = b'1';
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
/// Upper bound on any single length field, to reject garbage early.
const MAX_FIELD: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found:?}")]
    VersionMismatch { found: char },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint CRC mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("parameter {name} has shape {found:?}, config requires {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter set differs from config: {0}")]
    ParamSet(String),
    #[error("bad config record: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(params: &ModelParams, config: &ModelConfig, vocab: &Vocabulary) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC_PREFIX);
    out.push(VERSION);
    let mut text = config.to_kv();
    text.push_str("vocab=");
    text.push_str(&vocab.tokens().join(" "));
    text.push('\n');
    put_u64(&mut out, text.len() as u64);
    out.extend_from_slice(text.as_bytes());
    for (name, t) in params.iter() {
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        put_u64(&mut out, t.rank() as u64);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = CRC64.checksum(&out);
    put_u64(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len_field(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_FIELD || v as usize > self.bytes.len() {
            return Err(CheckpointError::Truncated { offset: self.bytes.len() });
        }
        Ok(v as usize)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn parse_config(text: &str) -> Result<(ModelConfig, Vocabulary)> {
    let pairs = parse_kv(text).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut config = ModelConfig::default();
    let mut vocab = None;
    for (k, v) in pairs {
        if k == "vocab" {
            let tokens: Vec<&str> = v.split(' ').filter(|t| !t.is_empty()).collect();
            vocab = Some(
                Vocabulary::from_tokens(&tokens)
                    .ok_or_else(|| CheckpointError::Config("invalid vocabulary".into()))?,
            );
        } else if !config.apply(&k, &v).map_err(|e| CheckpointError::Config(e.to_string()))? {
            return Err(CheckpointError::Config(format!("unknown key {k:?}")));
        }
    }
    config
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let vocab = vocab.ok_or_else(|| CheckpointError::Config("missing vocabulary".into()))?;
    Ok((config, vocab))
}

/// Parses and fully validates a checkpoint; never returns partial state.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC_PREFIX.len() + 1 {
        return Err(if MAGIC_PREFIX.starts_with(bytes) {
            CheckpointError::Truncated { offset: bytes.len() }
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..7] != MAGIC_PREFIX {
        return Err(CheckpointError::BadMagic);
    }
    if bytes[7] != VERSION {
        return Err(CheckpointError::VersionMismatch { found: bytes[7] as char });
    }
    let mut r = Reader { bytes, pos: 8 };
    let text_len = r.len_field()?;
    let text = std::str::from_utf8(r.take(text_len)?)
        .map_err(|_| CheckpointError::Config("config record is not UTF-8".into()))?;
    let (config, vocab) = parse_config(text)?;
    let specs = param_specs(&config);

    let mut params = ModelParams::default();
    let mut found = Vec::new();
    while r.remaining() > 8 {
        let name_len = r.len_field()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Config("parameter name is not UTF-8".into()))?;
        let rank = r.len_field()?;
        if rank > 3 {
            return Err(CheckpointError::ParamSet(format!("{name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.len_field()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated { offset: bytes.len() })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::ParamSet(e.to_string()))?;
        found.push(name.clone());
        params.insert(name, t);
    }
    if r.remaining() < 8 || found.len() < specs.len() {
        return Err(CheckpointError::Truncated { offset: bytes.len() });
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = r.u64()?;
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    for spec in &specs {
        match params.get(&spec.name) {
            None => return Err(CheckpointError::ParamSet(format!("missing {}", spec.name))),
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(CheckpointError::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    if found.len() != specs.len() || found.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CheckpointError::ParamSet(
            "unexpected, duplicate or out-of-order parameters".into(),
        ));
    }
    if vocab.len() != config.vocab_size {
        return Err(CheckpointError::Config(format!(
            "vocabulary has {} tokens, config says {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    Ok(Checkpoint { params, config, vocab })
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint(
    params: &ModelParams,
    config: &ModelConfig,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<()> {
    let bytes = encode(params, config, vocab);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}
