//! Model checkpointing.
//!
//! Layout, little-endian: magic "RSMD", version u32, config JSON length u32
//! + bytes, then every parameter in declaration order as a shape header
//! (rank u8, dims u32 each) followed by f32 data; CRC32 of all preceding
//! bytes as trailer. Parameters carry no names — the config reconstructs the
//! architecture and declaration order does the rest.

use super::{ModelConfig, ModelError, RetroModel};
use crate::tensor::Scalar;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"RSMD";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("expected magic RSMD, found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    BadVersion { found: u32 },
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch: file is corrupt")]
    ChecksumMismatch,
    #[error("embedded config rejected: {0}")]
    Config(String),
    #[error("parameter {name} has shape {found:?} on disk, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint holds {found} parameter tensors, model expects {expected}")]
    ParamCount { expected: usize, found: usize },
}

pub fn to_bytes<T: Scalar>(model: &RetroModel<T>) -> Vec<u8> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).unwrap();
    let cfg_json = model.config().canonical_json();
    buf.write_u32::<LittleEndian>(cfg_json.len() as u32).unwrap();
    buf.extend_from_slice(cfg_json.as_bytes());
    for (_, tensor) in model.params() {
        let shape = tensor.shape();
        buf.push(shape.len() as u8);
        for &dim in shape {
            buf.write_u32::<LittleEndian>(dim as u32).unwrap();
        }
        for v in tensor.data().iter() {
            buf.write_f32::<LittleEndian>(v.to_f64_lossy() as f32).unwrap();
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc).unwrap();
    buf
}

pub fn save<T: Scalar>(model: &RetroModel<T>, path: &Path) -> Result<(), CheckpointError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&to_bytes(model))?;
    file.sync_all()?;
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<RetroModel<f32>, ModelError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated.into());
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: [bytes[0], bytes[1], bytes[2], bytes[3]],
        }
        .into());
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated.into());
    }
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(&bytes[..bytes.len() - 4]) != stored_crc {
        return Err(CheckpointError::ChecksumMismatch.into());
    }

    let mut cur = &bytes[4..bytes.len() - 4];
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| CheckpointError::Truncated)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { found: version }.into());
    }
    let cfg_len = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| CheckpointError::Truncated)? as usize;
    if cur.len() < cfg_len {
        return Err(CheckpointError::Truncated.into());
    }
    let (cfg_bytes, rest) = cur.split_at(cfg_len);
    cur = rest;
    let cfg_json =
        std::str::from_utf8(cfg_bytes).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let cfg = ModelConfig::from_json(cfg_json).map_err(|e| CheckpointError::Config(e.to_string()))?;

    // seed is irrelevant: every value is overwritten below
    let model = RetroModel::<f32>::init(cfg, 0)?;
    let params = model.params();
    let mut loaded = 0usize;
    for (name, tensor) in &params {
        let rank = cur.read_u8().map_err(|_| CheckpointError::Truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(
                cur.read_u32::<LittleEndian>()
                    .map_err(|_| CheckpointError::Truncated)? as usize,
            );
        }
        if shape != tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: tensor.shape().to_vec(),
                found: shape,
            }
            .into());
        }
        let mut data = Vec::with_capacity(tensor.len());
        for _ in 0..tensor.len() {
            data.push(
                cur.read_f32::<LittleEndian>()
                    .map_err(|_| CheckpointError::Truncated)?,
            );
        }
        tensor.set_data(data)?;
        loaded += 1;
    }
    if !cur.is_empty() {
        return Err(CheckpointError::ParamCount {
            expected: params.len(),
            found: loaded + 1,
        }
        .into());
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<RetroModel<f32>, ModelError> {
    let bytes = std::fs::read(path).map_err(CheckpointError::from)?;
    from_bytes(&bytes)
}
