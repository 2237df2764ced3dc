//! `.nbckpt` container.
//!
//! ```text
//! 0..4    magic "NBC1"
//! 4..8    u32 LE format version (1)
//! 8..12   u32 LE header length H
//! 12..12+H  UTF-8 JSON header {config, transform_targets, tensors}
//! ...     f32 LE blobs; each manifest byte_offset counts from the first byte
//!         after the header
//! ```
//!
//! Tensors appear in the fixed order of [`tensor_names`], packed without gaps,
//! so equal parameters always produce equal bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tensor_names, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::objective::TargetMode;

const MAGIC: &[u8; 4] = b"NBC1";
const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    transform_targets: TargetMode,
    tensors: Vec<TensorEntry>,
}

/// A loaded model plus the training-time target mode, which decides whether
/// subject vectors are transformed at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub transform_targets: TargetMode,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }
}

pub fn encode_checkpoint(params: &ModelParams<f32>, targets: TargetMode) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let byte_len = 4 * t.len() as u64;
            let entry = TensorEntry {
                name,
                shape: vec![t.rows(), t.cols()],
                byte_offset: offset,
                byte_len,
            };
            offset += byte_len;
            entry
        })
        .collect();
    let header = Header {
        config: params.config().clone(),
        transform_targets: targets,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let format = |offset: usize, detail: String| Error::Format {
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 4 {
        return Err(Error::Corruption(format!("file is {} bytes, too short for magic", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Corruption("truncated preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format(4, format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let data_start = PREAMBLE + header_len;
    if bytes.len() < data_start {
        return Err(Error::Corruption(format!(
            "header claims {header_len} bytes, file has {}",
            bytes.len() - PREAMBLE
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start])
        .map_err(|e| format(PREAMBLE + e.column().saturating_sub(1), format!("header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| format(PREAMBLE, format!("header config: {e}")))?;

    let mut params = ModelParams::<f32>::zeros(&header.config)?;
    let names = tensor_names(&header.config);
    if header.tensors.len() != names.len() {
        return Err(format(
            PREAMBLE,
            format!("manifest lists {} tensors, config needs {}", header.tensors.len(), names.len()),
        ));
    }
    let data = &bytes[data_start..];
    let mut expected_offset = 0u64;
    for ((entry, name), tensor) in header.tensors.iter().zip(&names).zip(params.tensors_mut()) {
        if &entry.name != name {
            return Err(format(
                PREAMBLE,
                format!("manifest tensor '{}' where '{name}' expected", entry.name),
            ));
        }
        if entry.byte_offset != expected_offset {
            return Err(format(
                PREAMBLE,
                format!("tensor {name} at offset {} (expected {expected_offset})", entry.byte_offset),
            ));
        }
        if entry.shape != [tensor.rows(), tensor.cols()] {
            return Err(Error::Corruption(format!(
                "tensor {name} has shape {:?}, config implies {:?}",
                entry.shape,
                [tensor.rows(), tensor.cols()]
            )));
        }
        if entry.byte_len != 4 * tensor.len() as u64 {
            return Err(Error::Corruption(format!(
                "tensor {name} byte_len {} does not match shape",
                entry.byte_len
            )));
        }
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_len as usize;
        if end > data.len() {
            return Err(Error::Corruption(format!(
                "truncated: tensor {name} needs bytes up to {}, file has {}",
                data_start + end,
                bytes.len()
            )));
        }
        for (dst, chunk) in tensor.data_mut().iter_mut().zip(data[start..end].chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        if !tensor.all_finite() {
            return Err(Error::Corruption(format!("tensor {name} holds non-finite values")));
        }
        expected_offset = end as u64;
    }
    if data.len() as u64 != expected_offset {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after last tensor",
            data.len() as u64 - expected_offset
        )));
    }
    Ok(Checkpoint {
        params,
        transform_targets: header.transform_targets,
    })
}

pub fn save_checkpoint(params: &ModelParams<f32>, targets: TargetMode, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, targets)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
