//! Post-training int8 quantization: symmetric per-tensor scales (zero point
//! 0), min/max calibration, i32 accumulation and requantization between
//! layers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{LayerSpec, Model};
use super::ops::{self, conv_out_dim, ConvGeometry};
use super::InferError;
use crate::tensor::{DType, Tensor};

/// Smallest scale handed out, so all-zero tensors still quantize.
pub const SCALE_FLOOR: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
}

impl QuantParams {
    /// `max(|min|, |max|) / 127`, floored at [`SCALE_FLOOR`].
    pub fn from_max_abs(max_abs: f32) -> Self {
        Self {
            scale: (max_abs / 127.0).max(SCALE_FLOOR),
        }
    }

    fn from_values(values: &[f32]) -> Self {
        Self::from_max_abs(max_abs(values))
    }
}

fn max_abs(values: &[f32]) -> f32 {
    values.iter().fold(0f32, |m, v| m.max(v.abs()))
}

/// Calibrated activation ranges: the model input plus each trunk layer
/// output, keyed by layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub input: QuantParams,
    pub layers: BTreeMap<usize, QuantParams>,
}

/// Activation scales carried by a quantized model (and its FTM header).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationScales {
    pub input_scale: f32,
    pub layer_scales: Vec<f32>,
}

#[inline]
pub fn quantize_value(x: f32, scale: f32) -> i8 {
    (x as f64 / scale as f64).round().clamp(-127.0, 127.0) as i8
}

#[inline]
pub fn dequantize_value(q: i8, scale: f32) -> f32 {
    q as f32 * scale
}

fn quantize_tensor(t: &Tensor, scale: f32) -> Result<Tensor, InferError> {
    let q = t
        .as_f32()?
        .iter()
        .map(|&v| quantize_value(v, scale))
        .collect();
    Ok(Tensor::from_i8(t.shape().to_vec(), q, scale)?)
}

/// Min/max calibration over `samples`, tracking every trunk activation.
pub fn calibrate(model: &Model, samples: &[Tensor]) -> Result<CalibrationTable, InferError> {
    if samples.is_empty() {
        return Err(InferError::EmptyCalibration);
    }
    if !model.heads().is_empty() {
        return Err(InferError::Unsupported(
            "calibration of multi-head models".into(),
        ));
    }
    let mut input_max = 0f32;
    let mut layer_max = vec![0f32; model.layers().len()];
    for sample in samples {
        model.check_input(sample)?;
        input_max = input_max.max(max_abs(sample.as_f32()?));
        let mut x = sample.clone();
        for (i, layer) in model.layers().iter().enumerate() {
            x = model.run_layer_f32(layer, x)?;
            layer_max[i] = layer_max[i].max(max_abs(x.as_f32()?));
        }
    }
    Ok(CalibrationTable {
        input: QuantParams::from_max_abs(input_max),
        layers: layer_max
            .into_iter()
            .enumerate()
            .map(|(i, m)| (i, QuantParams::from_max_abs(m)))
            .collect(),
    })
}

/// Converts every multiplicative weight (conv, depthwise, linear, PReLU
/// slope) to i8 with its own per-tensor scale; biases stay f32 and are
/// folded into the i32 accumulators at run time.
pub fn quantize_model(model: &Model, params: &CalibrationTable) -> Result<Model, InferError> {
    if model.is_quantized() {
        return Err(InferError::Unsupported("model is already quantized".into()));
    }
    if !model.heads().is_empty() {
        return Err(InferError::Unsupported(
            "quantization of multi-head models".into(),
        ));
    }
    let layer_scales = (0..model.layers().len())
        .map(|i| {
            params
                .layers
                .get(&i)
                .map(|p| p.scale)
                .ok_or(InferError::MissingQuantParams(i))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut weights = model.weights().clone();
    for layer in model.layers() {
        if let Some(name) = layer.mac_weight() {
            let t = &model.weights()[name];
            if t.dtype() == DType::F32 {
                let scale = QuantParams::from_values(t.as_f32()?).scale;
                weights.insert(name.to_string(), quantize_tensor(t, scale)?);
            }
        }
    }
    let mut q = Model::new(
        model.input_shape().to_vec(),
        model.embedding_dim(),
        model.layers().to_vec(),
        weights,
    )?;
    q.quant = Some(ActivationScales {
        input_scale: params.input.scale,
        layer_scales,
    });
    q.validate()?;
    Ok(q)
}

/// i8 activation travelling between layers.
struct QAct {
    shape: Vec<usize>,
    data: Vec<i8>,
    scale: f32,
}

#[inline]
fn requantize(acc: i32, multiplier: f64) -> i8 {
    (acc as f64 * multiplier).round().clamp(-127.0, 127.0) as i8
}

fn bias_to_i32(bias: Option<&Tensor>, acc_scale: f64) -> Result<Option<Vec<i32>>, InferError> {
    bias.map(|b| {
        Ok(b.as_f32()?
            .iter()
            .map(|&v| (v as f64 / acc_scale).round() as i32)
            .collect())
    })
    .transpose()
}

fn weight_i8(t: &Tensor) -> Result<(&[i8], f32), InferError> {
    let scale = t.qscale().ok_or(InferError::NotQuantized)?;
    Ok((t.as_i8().map_err(|_| InferError::NotQuantized)?, scale))
}

/// Executes a quantized model: the input is quantized with the calibrated
/// input scale, MAC layers accumulate in i32 and requantize to the next
/// activation scale, and the final activation is returned dequantized (f32).
pub fn forward_i8(model: &Model, input: &Tensor) -> Result<Tensor, InferError> {
    let scales = model.activation_scales().ok_or(InferError::NotQuantized)?;
    model.check_input(input)?;
    let mut act = QAct {
        shape: input.shape().to_vec(),
        data: input
            .as_f32()?
            .iter()
            .map(|&v| quantize_value(v, scales.input_scale))
            .collect(),
        scale: scales.input_scale,
    };
    let last = model.layers().len().checked_sub(1);
    for (i, layer) in model.layers().iter().enumerate() {
        let out_scale = scales.layer_scales[i];
        if let LayerSpec::L2Norm = layer {
            let deq = Tensor::from_f32(
                act.shape.clone(),
                act.data
                    .iter()
                    .map(|&q| dequantize_value(q, act.scale))
                    .collect(),
            )?;
            let normed = ops::l2norm_f32(&deq)?;
            if Some(i) == last {
                return Ok(normed);
            }
            let data = normed
                .as_f32()?
                .iter()
                .map(|&v| quantize_value(v, out_scale))
                .collect();
            act = QAct {
                shape: act.shape,
                data,
                scale: out_scale,
            };
            continue;
        }
        act = run_layer_i8(model, layer, act, out_scale)?;
    }
    let data = act
        .data
        .iter()
        .map(|&q| dequantize_value(q, act.scale))
        .collect();
    Ok(Tensor::from_f32(act.shape, data)?)
}

fn run_layer_i8(
    model: &Model,
    layer: &LayerSpec,
    x: QAct,
    out_scale: f32,
) -> Result<QAct, InferError> {
    let w = |name: &str| &model.weights()[name];
    match layer {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
            ..
        } => conv_i8(
            x,
            w(weight),
            bias.as_deref().map(w),
            *out_channels,
            [*kernel; 2],
            *stride,
            *padding,
            false,
            out_scale,
        ),
        LayerSpec::DepthwiseConv2d {
            channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        } => conv_i8(
            x,
            w(weight),
            bias.as_deref().map(w),
            *channels,
            [*kernel; 2],
            *stride,
            *padding,
            true,
            out_scale,
        ),
        LayerSpec::GlobalDepthwise {
            channels,
            weight,
            bias,
        } => {
            let k = [x.shape[2], x.shape[3]];
            conv_i8(
                x,
                w(weight),
                bias.as_deref().map(w),
                *channels,
                k,
                1,
                0,
                true,
                out_scale,
            )
        }
        LayerSpec::Linear {
            in_features,
            out_features,
            weight,
            bias,
        } => {
            let (wq, ws) = weight_i8(w(weight))?;
            let acc_scale = x.scale as f64 * ws as f64;
            let n = x.shape[0];
            let mut acc = vec![0i32; n * out_features];
            if let Some(b) = bias_to_i32(bias.as_deref().map(w), acc_scale)? {
                for (i, a) in acc.iter_mut().enumerate() {
                    *a = b[i % out_features];
                }
            }
            ops::linear_accumulate(&x.data, wq, n, *in_features, *out_features, &mut acc);
            let m = acc_scale / out_scale as f64;
            Ok(QAct {
                shape: vec![n, *out_features],
                data: acc.into_iter().map(|a| requantize(a, m)).collect(),
                scale: out_scale,
            })
        }
        LayerSpec::Prelu { channels, alpha } => {
            let (aq, a_scale) = weight_i8(w(alpha))?;
            let plane: usize = x.shape[2..].iter().product();
            let pos = x.scale as f64 / out_scale as f64;
            let neg = x.scale as f64 * a_scale as f64 / out_scale as f64;
            let data = x
                .data
                .iter()
                .enumerate()
                .map(|(i, &q)| {
                    if q >= 0 {
                        requantize(q as i32, pos)
                    } else {
                        let c = (i / plane) % channels;
                        requantize(q as i32 * aq[c] as i32, neg)
                    }
                })
                .collect();
            Ok(QAct {
                shape: x.shape,
                data,
                scale: out_scale,
            })
        }
        LayerSpec::AddBias { channels, bias } => {
            let b = bias_to_i32(Some(w(bias)), x.scale as f64)?.expect("bias present");
            let plane: usize = x.shape[2..].iter().product();
            let m = x.scale as f64 / out_scale as f64;
            let data = x
                .data
                .iter()
                .enumerate()
                .map(|(i, &q)| requantize(q as i32 + b[(i / plane) % channels], m))
                .collect();
            Ok(QAct {
                shape: x.shape,
                data,
                scale: out_scale,
            })
        }
        LayerSpec::Flatten => {
            let n = x.shape[0];
            let rest = x.data.len() / n;
            let m = x.scale as f64 / out_scale as f64;
            Ok(QAct {
                shape: vec![n, rest],
                data: x.data.iter().map(|&q| requantize(q as i32, m)).collect(),
                scale: out_scale,
            })
        }
        LayerSpec::L2Norm => unreachable!("handled in forward_i8"),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_i8(
    x: QAct,
    weight: &Tensor,
    bias: Option<&Tensor>,
    out_channels: usize,
    [kh, kw]: [usize; 2],
    stride: usize,
    padding: usize,
    depthwise: bool,
    out_scale: f32,
) -> Result<QAct, InferError> {
    let (wq, ws) = weight_i8(weight)?;
    let [n, c, h, w] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let oh =
        conv_out_dim(h, kh, stride, padding).ok_or_else(|| InferError::Geometry("conv".into()))?;
    let ow =
        conv_out_dim(w, kw, stride, padding).ok_or_else(|| InferError::Geometry("conv".into()))?;
    let geom = ConvGeometry {
        batch: n,
        in_channels: c,
        in_h: h,
        in_w: w,
        out_channels,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    };
    let acc_scale = x.scale as f64 * ws as f64;
    let plane = oh * ow;
    let mut acc = vec![0i32; n * out_channels * plane];
    if let Some(b) = bias_to_i32(bias, acc_scale)? {
        for (i, chunk) in acc.chunks_mut(plane).enumerate() {
            chunk.fill(b[i % out_channels]);
        }
    }
    ops::conv_accumulate(&x.data, wq, &geom, depthwise, &mut acc);
    let m = acc_scale / out_scale as f64;
    Ok(QAct {
        shape: vec![n, out_channels, oh, ow],
        data: acc.into_iter().map(|a| requantize(a, m)).collect(),
        scale: out_scale,
    })
}

/// [`calibrate`] followed by [`quantize_model`].
pub fn calibrate_and_quantize(model: &Model, samples: &[Tensor]) -> Result<Model, InferError> {
    let table = calibrate(model, samples)?;
    quantize_model(model, &table)
}
