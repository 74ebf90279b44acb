//! Binary model archive.
//!
//! Layout: the magic `FTCP`, a little-endian `u32` format version, a
//! little-endian `u64` header length, a UTF-8 JSON header, then the raw
//! little-endian payload. The header records the model configuration, encoder
//! options, vocabulary size and, per tensor, its dtype, shape and byte offset
//! into the payload.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EncoderOptions, Model, ModelConfig, ParamStore};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FTCP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub options: EncoderOptions,
    pub radicals: usize,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// Serializes `model` to bytes. Tensors are laid out in name order.
pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut payload = Vec::with_capacity(model.params.scalar_count() * T::DTYPE.size());
    let mut tensors = BTreeMap::new();
    for (name, t) in model.params.iter() {
        tensors.insert(
            name.clone(),
            TensorEntry {
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset: payload.len(),
            },
        );
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = Header {
        config: model.config.clone(),
        options: model.options,
        radicals: model.radicals,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

/// Parses a checkpoint. Every tensor must have dtype `T`.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let corrupt = |m: String| CheckpointError::CorruptHeader(m);
    if bytes.len() < 4 {
        return Err(corrupt("file shorter than the magic bytes".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 16 {
        return Err(corrupt("truncated preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(format!("header length {header_len} exceeds the file")))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| corrupt(format!("header JSON: {e}")))?;
    let payload = &bytes[header_end..];

    let width = T::DTYPE.size();
    let mut params = ParamStore::new();
    let mut expected_len = 0;
    for (name, entry) in &header.tensors {
        if entry.dtype != T::DTYPE {
            return Err(corrupt(format!(
                "`{name}` is {:?}, expected {:?}",
                entry.dtype,
                T::DTYPE
            )));
        }
        let count: usize = entry.shape.iter().product();
        let end = count
            .checked_mul(width)
            .and_then(|n| n.checked_add(entry.offset))
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| corrupt(format!("`{name}` extends past the payload")))?;
        let data: Vec<T> = payload[entry.offset..end]
            .chunks_exact(width)
            .map(T::read_le)
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| corrupt(format!("`{name}`: {e}")))?;
        if !t.is_finite() {
            return Err(corrupt(format!("`{name}` holds non-finite values")));
        }
        params.insert(name.clone(), t);
        expected_len += count * width;
    }
    if expected_len != payload.len() {
        return Err(corrupt(format!(
            "payload is {} bytes, tensors cover {expected_len}",
            payload.len()
        )));
    }
    let model = Model {
        config: header.config,
        options: header.options,
        radicals: header.radicals,
        params,
    };
    model
        .config
        .validate()
        .and_then(|_| model.validate_layout())
        .map_err(|e| corrupt(e.to_string()))?;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    from_bytes(&std::fs::read(path)?)
}
