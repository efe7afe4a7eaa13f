//! Kernel-level operators. Convolutions are cross-correlations with zero
//! padding; all 4-D data is NCHW.
//!
//! The multiply-accumulate cores are generic over [`Element`] so the f32 and
//! int8 paths share loop structure (i8 products accumulate in i32).

use std::ops::{AddAssign, Mul};

use super::InferError;
use crate::tensor::Tensor;

pub trait Element: Copy {
    type Acc: Copy + Default + AddAssign + Mul<Output = Self::Acc>;
    fn widen(self) -> Self::Acc;
}

impl Element for f32 {
    type Acc = f32;
    #[inline(always)]
    fn widen(self) -> f32 {
        self
    }
}

impl Element for i8 {
    type Acc = i32;
    #[inline(always)]
    fn widen(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        conv_out_dim(self.in_h, self.kernel_h, self.stride, self.padding).unwrap_or(0)
    }

    pub fn out_w(&self) -> usize {
        conv_out_dim(self.in_w, self.kernel_w, self.stride, self.padding).unwrap_or(0)
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_h() * self.out_w()
    }
}

/// Range of output indices `o` for which `o * stride + k - pad` lands in `[0, extent)`.
#[inline]
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // o * stride + k - pad <= extent - 1
    let hi = if extent + pad < k + 1 {
        0
    } else {
        ((extent + pad - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Accumulates a dense or depthwise convolution into `out`, which must hold
/// `geom.output_len()` accumulators already initialised (typically to bias).
/// With `depthwise`, `in_channels == out_channels` and each output channel
/// only reads its own input channel; the weight layout is then `(C, 1, kh, kw)`.
pub fn conv_accumulate<E: Element>(
    input: &[E],
    weight: &[E],
    geom: &ConvGeometry,
    depthwise: bool,
    out: &mut [E::Acc],
) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let (ih, iw) = (geom.in_h, geom.in_w);
    let (kh, kw) = (geom.kernel_h, geom.kernel_w);
    let s = geom.stride;
    let in_plane = ih * iw;
    let out_plane = oh * ow;
    let group_in = if depthwise { 1 } else { geom.in_channels };

    for n in 0..geom.batch {
        for oc in 0..geom.out_channels {
            let out_base = (n * geom.out_channels + oc) * out_plane;
            let out_slice = &mut out[out_base..out_base + out_plane];
            for g in 0..group_in {
                let ic = if depthwise { oc } else { g };
                let in_base = (n * geom.in_channels + ic) * in_plane;
                let plane = &input[in_base..in_base + in_plane];
                let w_base = (oc * group_in + g) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, ih, ky, s, geom.padding);
                    for kx in 0..kw {
                        let wv = weight[w_base + ky * kw + kx].widen();
                        let (ox_lo, ox_hi) = valid_range(ow, iw, kx, s, geom.padding);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - geom.padding;
                            let row = &plane[iy * iw..(iy + 1) * iw];
                            let orow = &mut out_slice[oy * ow..(oy + 1) * ow];
                            for ox in ox_lo..ox_hi {
                                let ix = ox * s + kx - geom.padding;
                                orow[ox] += wv * row[ix].widen();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[n, o] += sum_i weight[o, i] * input[n, i]`.
pub fn linear_accumulate<E: Element>(
    input: &[E],
    weight: &[E],
    batch: usize,
    in_features: usize,
    out_features: usize,
    out: &mut [E::Acc],
) {
    for n in 0..batch {
        let x = &input[n * in_features..(n + 1) * in_features];
        for o in 0..out_features {
            let w = &weight[o * in_features..(o + 1) * in_features];
            let mut acc = E::Acc::default();
            for (wi, xi) in w.iter().zip(x) {
                acc += wi.widen() * xi.widen();
            }
            out[n * out_features + o] += acc;
        }
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4], InferError> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(InferError::Geometry(format!(
            "{what} expects NCHW input, got {s:?}"
        ))),
    }
}

fn init_with_bias(
    batch: usize,
    channels: usize,
    plane: usize,
    bias: Option<&Tensor>,
) -> Result<Vec<f32>, InferError> {
    let mut out = vec![0f32; batch * channels * plane];
    if let Some(b) = bias {
        let b = b.as_f32()?;
        if b.len() != channels {
            return Err(InferError::Geometry(format!(
                "bias has {} elements for {channels} channels",
                b.len()
            )));
        }
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(b[i % channels]);
        }
    }
    Ok(out)
}

/// Dense 2-D convolution; `weight` is `(Cout, Cin, k, k)`.
pub fn conv2d_f32(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor, InferError> {
    let [n, c, h, w] = dims4(input, "conv2d")?;
    let [cout, cin, kh, kw] = dims4(weight, "conv2d weight")?;
    if cin != c {
        return Err(InferError::Geometry(format!(
            "conv2d weight expects {cin} input channels, input has {c}"
        )));
    }
    conv_generic(
        input,
        weight,
        bias,
        [n, c, h, w],
        cout,
        [kh, kw],
        stride,
        padding,
        false,
    )
}

/// Per-channel convolution; `weight` is `(C, 1, k, k)`.
pub fn depthwise_conv2d_f32(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor, InferError> {
    let [n, c, h, w] = dims4(input, "depthwise_conv2d")?;
    let [wc, one, kh, kw] = dims4(weight, "depthwise weight")?;
    if wc != c || one != 1 {
        return Err(InferError::Geometry(format!(
            "depthwise weight {:?} does not fit {c} channels",
            weight.shape()
        )));
    }
    conv_generic(
        input,
        weight,
        bias,
        [n, c, h, w],
        c,
        [kh, kw],
        stride,
        padding,
        true,
    )
}

/// Depthwise convolution whose kernel covers the whole feature map,
/// collapsing `(N, C, H, W)` to `(N, C, 1, 1)`.
pub fn global_depthwise_f32(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor, InferError> {
    let [_, c, h, w] = dims4(input, "global_depthwise")?;
    if weight.shape() != [c, 1, h, w] {
        return Err(InferError::Geometry(format!(
            "global_depthwise weight {:?} must be [{c}, 1, {h}, {w}]",
            weight.shape()
        )));
    }
    depthwise_conv2d_f32(input, weight, bias, 1, 0)
}

#[allow(clippy::too_many_arguments)]
fn conv_generic(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    [n, c, h, w]: [usize; 4],
    cout: usize,
    [kh, kw]: [usize; 2],
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Result<Tensor, InferError> {
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(InferError::Geometry(format!(
            "kernel {kh}x{kw} stride {stride} pad {padding} does not fit {h}x{w}"
        )));
    };
    let geom = ConvGeometry {
        batch: n,
        in_channels: c,
        in_h: h,
        in_w: w,
        out_channels: cout,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    };
    let mut out = init_with_bias(n, cout, oh * ow, bias)?;
    conv_accumulate(
        input.as_f32()?,
        weight.as_f32()?,
        &geom,
        depthwise,
        &mut out,
    );
    Ok(Tensor::from_f32(vec![n, cout, oh, ow], out)?)
}

/// `y = x W^T + b` on `(N, in)` input with `(out, in)` weight.
pub fn linear_f32(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor, InferError> {
    let (n, fin) = match *input.shape() {
        [n, f] => (n, f),
        ref s => {
            return Err(InferError::Geometry(format!(
                "linear expects (N, in) input, got {s:?}"
            )))
        }
    };
    let (fout, win) = match *weight.shape() {
        [o, i] => (o, i),
        ref s => {
            return Err(InferError::Geometry(format!(
                "linear weight must be 2-D, got {s:?}"
            )))
        }
    };
    if win != fin {
        return Err(InferError::Geometry(format!(
            "linear weight expects {win} features, input has {fin}"
        )));
    }
    let mut out = init_with_bias(n, fout, 1, bias)?;
    linear_accumulate(input.as_f32()?, weight.as_f32()?, n, fin, fout, &mut out);
    Ok(Tensor::from_f32(vec![n, fout], out)?)
}

/// Size of the per-channel plane (product of dims after the channel axis)
/// for a tensor shaped `(N, C, ...)`.
fn channel_layout(shape: &[usize], what: &str) -> Result<(usize, usize, usize), InferError> {
    if shape.len() < 2 {
        return Err(InferError::Geometry(format!(
            "{what} expects (N, C, ...) input, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Parametric ReLU with one slope per channel: `x` if `x >= 0`, else `alpha_c * x`.
pub fn prelu_f32(input: &Tensor, alpha: &Tensor) -> Result<Tensor, InferError> {
    let (_, c, plane) = channel_layout(input.shape(), "prelu")?;
    let a = alpha.as_f32()?;
    if a.len() != c {
        return Err(InferError::Geometry(format!(
            "prelu has {} slopes for {c} channels",
            a.len()
        )));
    }
    let mut data = input.as_f32()?.to_vec();
    for (i, chunk) in data.chunks_mut(plane).enumerate() {
        let slope = a[i % c];
        for v in chunk.iter_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
    }
    Ok(Tensor::from_f32(input.shape().to_vec(), data)?)
}

pub fn add_bias_f32(input: &Tensor, bias: &Tensor) -> Result<Tensor, InferError> {
    let (_, c, plane) = channel_layout(input.shape(), "add_bias")?;
    let b = bias.as_f32()?;
    if b.len() != c {
        return Err(InferError::Geometry(format!(
            "bias has {} elements for {c} channels",
            b.len()
        )));
    }
    let mut data = input.as_f32()?.to_vec();
    for (i, chunk) in data.chunks_mut(plane).enumerate() {
        let bv = b[i % c];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
    Ok(Tensor::from_f32(input.shape().to_vec(), data)?)
}

/// `(N, ...)` to `(N, prod(...))`.
pub fn flatten(input: Tensor) -> Result<Tensor, InferError> {
    let n = *input
        .shape()
        .first()
        .ok_or_else(|| InferError::Geometry("flatten of a scalar".into()))?;
    let rest = input.len() / n;
    Ok(input.reshape(vec![n, rest])?)
}

/// Normalizes each batch row to unit Euclidean length. All-zero rows stay zero.
pub fn l2norm_f32(input: &Tensor) -> Result<Tensor, InferError> {
    let n = *input
        .shape()
        .first()
        .ok_or_else(|| InferError::Geometry("l2norm of a scalar".into()))?;
    let mut data = input.to_f32_vec();
    let row = data.len() / n;
    for chunk in data.chunks_mut(row) {
        let norm = chunk
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            chunk
                .iter_mut()
                .for_each(|v| *v = (*v as f64 / norm) as f32);
        }
    }
    Ok(Tensor::from_f32(input.shape().to_vec(), data)?)
}
