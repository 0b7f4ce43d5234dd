//! Mapper checkpoint container.
//!
//! Layout: the 8-byte magic `GHSTMAP1`, a little-endian `u64` header
//! length, a JSON header (config, stats, tensor index) and the tensor data
//! as little-endian `f32`. Tensor offsets are byte offsets into the data
//! section.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CheckpointStats, MapperCheckpoint, MapperConfig, MapperWeights};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GHSTMAP1";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER_BYTES: u64 = 1 << 20;
/// Refuses configs whose parameter count would exceed 4 GiB of f32 data.
const MAX_PARAMS: usize = 1 << 30;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: MapperConfig,
    stats: CheckpointStats,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &MapperCheckpoint) -> Result<Vec<u8>> {
    let config = *ckpt.config();
    let layout = config.layout();
    let header = Header {
        format_version: FORMAT_VERSION,
        config,
        stats: ckpt.stats.clone(),
        tensors: layout
            .tensors(&config)
            .into_iter()
            .map(|(name, shape, range)| TensorEntry {
                name: name.to_string(),
                shape,
                offset: range.start * 4,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let data = &ckpt.weights().data;
    let mut out = Vec::with_capacity(16 + json.len() + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<MapperCheckpoint> {
    let err = |m: String| Error::decode("mapper checkpoint", m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(err("missing GHSTMAP1 magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_BYTES || header_len as usize > bytes.len() - 16 {
        return Err(err(format!("header length {header_len} out of range")));
    }
    let header_end = 16 + header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| err(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(err(format!("unsupported format version {}", header.format_version)));
    }
    let config = header.config;
    config.validate().map_err(|e| err(e.to_string()))?;
    let dims = [config.d_clip, config.d_m, config.n_tokens, config.d_hidden, config.d_ctx];
    if dims.iter().any(|&d| d > MAX_PARAMS) {
        return Err(err("dimension too large".into()));
    }
    let layout = config.layout();
    if layout.total > MAX_PARAMS {
        return Err(err(format!("{} parameters is too many", layout.total)));
    }
    let data = &bytes[header_end..];
    if data.len() != layout.total * 4 {
        return Err(err(format!(
            "expected {} bytes of tensor data, found {}",
            layout.total * 4,
            data.len()
        )));
    }
    let mut index: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for t in &header.tensors {
        if index.insert(t.name.as_str(), t).is_some() {
            return Err(err(format!("duplicate tensor {:?}", t.name)));
        }
    }
    let expected = layout.tensors(&config);
    if index.len() != expected.len() {
        return Err(err(format!("expected {} tensors, found {}", expected.len(), index.len())));
    }
    let mut flat = vec![0.0; layout.total];
    for (name, shape, range) in expected {
        let entry = index.get(name).ok_or_else(|| err(format!("missing tensor {name}")))?;
        if entry.shape != shape {
            return Err(err(format!("tensor {name} has shape {:?}, expected {shape:?}", entry.shape)));
        }
        let len = range.len() * 4;
        let start = entry.offset;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= data.len() && start % 4 == 0)
            .ok_or_else(|| err(format!("tensor {name} offset {start} out of range")))?;
        for (dst, chunk) in flat[range].iter_mut().zip(data[start..end].chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(err(format!("tensor {name} holds a non-finite value")));
            }
            *dst = f64::from(v);
        }
    }
    MapperCheckpoint::new(MapperWeights { config, data: flat }, header.stats)
}
