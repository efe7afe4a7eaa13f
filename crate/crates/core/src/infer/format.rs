//! FTM model container.
//!
//! ```text
//! bytes 0..4     magic "FTM1"
//! bytes 4..8     u32 LE header length L
//! bytes 8..8+L   UTF-8 JSON header
//! bytes 8+L..    blob; tensor offsets are relative to its start
//! ```
//!
//! The header is `{version: 1, input_shape, embedding_dim, layers, tensors}`
//! plus the optional `heads` (detector branches) and `quant` (activation
//! scales of a quantized model). Tensor entries are
//! `{name, shape, dtype: "f32"|"i8", qscale?, offset, byte_len}`; element
//! data is little-endian.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{HeadBranch, LayerSpec, Model};
use super::quant::ActivationScales;
use super::InferError;
use crate::tensor::{DType, Tensor, TensorData};

pub const MAGIC: &[u8; 4] = b"FTM1";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    input_shape: Vec<usize>,
    embedding_dim: usize,
    layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    heads: Vec<HeadBranch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<ActivationScales>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qscale: Option<f32>,
    offset: u64,
    byte_len: u64,
}

pub fn load_model(bytes: &[u8]) -> Result<Model, InferError> {
    let magic: [u8; 4] = bytes
        .get(..4)
        .ok_or_else(|| InferError::Truncated(format!("{} bytes, no magic", bytes.len())))?
        .try_into()
        .unwrap();
    if &magic != MAGIC {
        return Err(InferError::BadMagic(magic));
    }
    let len_bytes = bytes
        .get(4..8)
        .ok_or_else(|| InferError::Truncated("missing header length".into()))?;
    let header_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            InferError::Truncated(format!(
                "header declares {header_len} bytes, only {} available",
                bytes.len().saturating_sub(8)
            ))
        })?;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| InferError::Header(e.to_string()))?;
    if header.version != VERSION {
        return Err(InferError::UnsupportedVersion(header.version));
    }
    let blob = &bytes[header_end..];

    let mut weights = BTreeMap::new();
    for entry in &header.tensors {
        let start = usize::try_from(entry.offset).unwrap_or(usize::MAX);
        let len = usize::try_from(entry.byte_len).unwrap_or(usize::MAX);
        let raw = start
            .checked_add(len)
            .and_then(|end| blob.get(start..end))
            .ok_or_else(|| {
                InferError::Truncated(format!(
                    "tensor {:?} spans {}..{} past blob end {}",
                    entry.name,
                    entry.offset,
                    entry.offset.saturating_add(entry.byte_len),
                    blob.len()
                ))
            })?;
        let count: usize = entry.shape.iter().product();
        let elem = match entry.dtype {
            DType::F32 => 4,
            DType::I8 => 1,
        };
        if count * elem != len {
            return Err(InferError::ShapeMismatch {
                layer: format!("tensor {:?}", entry.name),
                detail: format!(
                    "shape {:?} needs {} bytes, byte_len is {len}",
                    entry.shape,
                    count * elem
                ),
            });
        }
        let tensor = match entry.dtype {
            DType::F32 => {
                if entry.qscale.is_some() {
                    return Err(InferError::Header(format!(
                        "f32 tensor {:?} carries a qscale",
                        entry.name
                    )));
                }
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_f32(entry.shape.clone(), data)?
            }
            DType::I8 => {
                let scale = entry.qscale.ok_or_else(|| {
                    InferError::Header(format!("i8 tensor {:?} has no qscale", entry.name))
                })?;
                Tensor::from_i8(
                    entry.shape.clone(),
                    raw.iter().map(|&b| b as i8).collect(),
                    scale,
                )?
            }
        };
        if weights.insert(entry.name.clone(), tensor).is_some() {
            return Err(InferError::Header(format!(
                "duplicate tensor {:?}",
                entry.name
            )));
        }
    }

    let mut model = Model::with_heads(
        header.input_shape,
        header.embedding_dim,
        header.layers,
        header.heads,
        weights,
    )?;
    model.quant = header.quant;
    model.validate()?;
    Ok(model)
}

/// Serializes a model; tensors are written in name order so output is
/// byte-for-byte reproducible.
pub fn save_model(model: &Model) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.weights() {
        let offset = blob.len() as u64;
        match t.data() {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| blob.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8 { data, .. } => blob.extend(data.iter().map(|&q| q as u8)),
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: t.dtype(),
            qscale: t.qscale(),
            offset,
            byte_len: blob.len() as u64 - offset,
        });
    }
    let header = Header {
        version: VERSION,
        input_shape: model.input_shape().to_vec(),
        embedding_dim: model.embedding_dim(),
        layers: model.layers().to_vec(),
        heads: model.heads().to_vec(),
        quant: model.activation_scales().cloned(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header is always serializable");
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}
