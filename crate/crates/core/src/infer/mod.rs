//! Reference CNN executor for the MobileFaceNet operator family.
//!
//! A [`Model`] is a sequential trunk of [`LayerSpec`]s plus optional head
//! branches tapped off the trunk (multi-scale detectors). Execution comes in
//! two flavours: plain f32 ([`forward_f32`]) and symmetric per-tensor int8
//! with 32-bit accumulation ([`forward_i8`]), the latter produced by
//! [`calibrate`] + [`quantize_model`]. Models travel as FTM containers, see
//! [`format`].

pub mod format;
mod model;
pub mod ops;
mod quant;

pub use format::{load_model, save_model};
pub use model::{count_flops, forward_f32, forward_heads_f32, HeadBranch, LayerSpec, Model};
pub use quant::{
    calibrate, calibrate_and_quantize, dequantize_value, forward_i8, quantize_model,
    quantize_value, ActivationScales, CalibrationTable, QuantParams, SCALE_FLOOR,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

/// Which execution path an embedder runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    I8,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::I8 => "i8",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "i8" | "int8" => Ok(Precision::I8),
            other => Err(format!("unknown precision {other:?} (expected f32 or i8)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum InferError {
    #[error("bad magic: expected \"FTM1\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated model file: {0}")]
    Truncated(String),
    #[error("malformed model header: {0}")]
    Header(String),
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),
    #[error("layer {layer} references unknown tensor {name:?}")]
    UnresolvedWeight { layer: String, name: String },
    #[error("shape mismatch at {layer}: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("calibration needs at least one sample")]
    EmptyCalibration,
    #[error("no quantization parameters for layer {0}")]
    MissingQuantParams(usize),
    #[error("model is not quantized")]
    NotQuantized,
    #[error("model holds quantized weights; use the i8 path")]
    QuantizedWeights,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
