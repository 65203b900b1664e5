//! Binary parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   b"ECGNETCK"
//! version u32
//! header  u32 length + UTF-8 TOML (arch, aggregator, config hash, config)
//! count   u32
//! count x { u32 name length, name, u8 kind, u32 rank, u32 dims.., f32 values.. }
//! ```
//!
//! Values are stored as `f32`, so an `f32` model round-trips bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffcompute::{cst, to_f64, ParamKind, Real};
use crate::network::{AggregatorKind, Arch, Model, ModelConfig, NetworkError};

pub const MAGIC: &[u8; 8] = b"ECGNETCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("config hash mismatch: header says {stored}, config hashes to {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("checkpoint has unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error("parameter {name} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Arch,
    pub aggregator: AggregatorKind,
    pub config_hash: String,
    pub config: ModelConfig,
}

/// SHA-256 of the config's TOML form, hex encoded.
pub fn config_hash(config: &ModelConfig) -> String {
    let text = toml::to_string(config).expect("model config serializes");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

struct Block {
    kind: ParamKind,
    shape: Vec<usize>,
    values: Vec<f32>,
}

pub fn to_bytes<T: Real>(model: &Model<T>) -> Vec<u8> {
    let header = CheckpointHeader {
        arch: model.config.arch,
        aggregator: model.aggregator_kind(),
        config_hash: config_hash(&model.config),
        config: model.config.clone(),
    };
    let header = toml::to_string(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(match p.kind {
            ParamKind::Weight => 0,
            ParamKind::Buffer => 1,
        });
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.value {
            out.extend_from_slice(&(to_f64(v) as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(CheckpointError::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "checkpoint truncated",
            )));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let mut r = Reader { buf: bytes };
    parse_header(&mut r)
}

fn parse_header(r: &mut Reader) -> Result<CheckpointHeader> {
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let header: CheckpointHeader = toml::from_str(text).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let computed = config_hash(&header.config);
    if computed != header.config_hash {
        return Err(CheckpointError::HashMismatch {
            stored: header.config_hash,
            computed,
        });
    }
    if header.arch != header.config.arch {
        return Err(CheckpointError::Header("arch disagrees with config".into()));
    }
    Ok(header)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { buf: bytes };
    let header = parse_header(&mut r)?;
    let count = r.u32()? as usize;
    let mut blocks = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let kind = match r.take(1)?[0] {
            0 => ParamKind::Weight,
            1 => ParamKind::Buffer,
            k => return Err(CheckpointError::Header(format!("unknown parameter kind {k} for {name}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if blocks.insert(name.clone(), Block { kind, shape, values }).is_some() {
            return Err(CheckpointError::Header(format!("duplicate parameter {name}")));
        }
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Header(format!("{} trailing bytes", r.buf.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::<T>::build_with_rng(header.config.clone(), &mut rng)?;
    if model.aggregator_kind() != header.aggregator {
        model.swap_aggregator(header.aggregator, &mut rng)?;
    }
    for p in model.params_mut() {
        let block = blocks
            .remove(&p.name)
            .ok_or_else(|| CheckpointError::MissingParam(p.name.clone()))?;
        if block.shape != p.shape || block.kind != p.kind {
            return Err(CheckpointError::ShapeMismatch {
                name: p.name.clone(),
                expected: p.shape.clone(),
                found: block.shape,
            });
        }
        p.value = block.values.iter().map(|&v| cst(v as f64)).collect();
    }
    if let Some(name) = blocks.into_keys().next() {
        return Err(CheckpointError::UnexpectedParam(name));
    }
    Ok(model)
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_config() {
        let a = config_hash(&ModelConfig::cnn());
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash(&ModelConfig::cnn()));
        assert_ne!(a, config_hash(&ModelConfig::cnn().with_scale(0.5)));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::<f32>::build(ModelConfig::crnn().with_scale(0.125), 9).unwrap();
        let bytes = to_bytes(&model);
        let back: Model<f32> = from_bytes(&bytes).unwrap();
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn swapped_aggregator_is_restored() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Model::<f32>::build(ModelConfig::crnn().with_scale(0.125), 9).unwrap();
        model.swap_aggregator(AggregatorKind::TemporalAverage, &mut rng).unwrap();
        let back: Model<f32> = from_bytes(&to_bytes(&model)).unwrap();
        assert_eq!(back.aggregator_kind(), AggregatorKind::TemporalAverage);
        assert_eq!(read_header(&to_bytes(&model)).unwrap().aggregator, AggregatorKind::TemporalAverage);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let model = Model::<f32>::build(ModelConfig::cnn().with_scale(0.125), 1).unwrap();
        let bytes = to_bytes(&model);
        assert!(matches!(from_bytes::<f32>(b"NOTACKPT"), Err(CheckpointError::BadMagic)));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(from_bytes::<f32>(&v2), Err(CheckpointError::UnsupportedVersion(2))));
        assert!(matches!(from_bytes::<f32>(&bytes[..bytes.len() - 3]), Err(CheckpointError::Io(_))));
        let text = String::from_utf8_lossy(&bytes).to_string();
        let at = text.find("scale = 0.125").unwrap();
        let mut tampered = bytes.clone();
        tampered[at + 8..at + 13].copy_from_slice(b"0.250");
        assert!(matches!(from_bytes::<f32>(&tampered), Err(CheckpointError::HashMismatch { .. })));
    }
}
