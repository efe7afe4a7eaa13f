use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ops::{self, conv_out_dim};
use super::quant::ActivationScales;
use super::InferError;
use crate::tensor::{DType, Tensor};

/// One layer of a sequential network. Weight fields name tensors in the
/// model's weight map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    DepthwiseConv2d {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Prelu {
        channels: usize,
        alpha: String,
    },
    AddBias {
        channels: usize,
        bias: String,
    },
    /// Depthwise conv with a kernel spanning the entire feature map.
    GlobalDepthwise {
        channels: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Flatten,
    #[serde(rename = "l2norm")]
    L2Norm,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Prelu { .. } => "prelu",
            LayerSpec::AddBias { .. } => "add_bias",
            LayerSpec::GlobalDepthwise { .. } => "global_depthwise",
            LayerSpec::Flatten => "flatten",
            LayerSpec::L2Norm => "l2norm",
        }
    }

    /// Names of the tensors this layer reads, weights first.
    pub fn weight_refs(&self) -> Vec<&str> {
        let mut refs = Vec::new();
        match self {
            LayerSpec::Conv2d { weight, bias, .. }
            | LayerSpec::DepthwiseConv2d { weight, bias, .. }
            | LayerSpec::Linear { weight, bias, .. }
            | LayerSpec::GlobalDepthwise { weight, bias, .. } => {
                refs.push(weight.as_str());
                refs.extend(bias.as_deref());
            }
            LayerSpec::Prelu { alpha, .. } => refs.push(alpha),
            LayerSpec::AddBias { bias, .. } => refs.push(bias),
            LayerSpec::Flatten | LayerSpec::L2Norm => {}
        }
        refs
    }

    /// The multiplicative weight tensor (quantized on the i8 path), if any.
    pub(crate) fn mac_weight(&self) -> Option<&str> {
        match self {
            LayerSpec::Conv2d { weight, .. }
            | LayerSpec::DepthwiseConv2d { weight, .. }
            | LayerSpec::Linear { weight, .. }
            | LayerSpec::GlobalDepthwise { weight, .. } => Some(weight),
            LayerSpec::Prelu { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    /// Multiply-accumulates per output element.
    fn macs_per_output(&self, in_shape: &[usize]) -> u64 {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => (in_channels * kernel * kernel) as u64,
            LayerSpec::DepthwiseConv2d { kernel, .. } => (kernel * kernel) as u64,
            LayerSpec::Linear { in_features, .. } => *in_features as u64,
            LayerSpec::GlobalDepthwise { .. } => in_shape[2..].iter().product::<usize>() as u64,
            _ => 0,
        }
    }
}

/// A branch computed from the trunk activation after `tap` trunk layers
/// (`tap == 0` reads the model input). Detectors use one branch per stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBranch {
    pub tap: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub(crate) input_shape: Vec<usize>,
    pub(crate) embedding_dim: usize,
    pub(crate) layers: Vec<LayerSpec>,
    pub(crate) heads: Vec<HeadBranch>,
    pub(crate) weights: BTreeMap<String, Tensor>,
    pub(crate) quant: Option<ActivationScales>,
}

impl Model {
    /// Builds and validates a trunk-only model.
    pub fn new(
        input_shape: Vec<usize>,
        embedding_dim: usize,
        layers: Vec<LayerSpec>,
        weights: BTreeMap<String, Tensor>,
    ) -> Result<Self, InferError> {
        Self::with_heads(input_shape, embedding_dim, layers, Vec::new(), weights)
    }

    pub fn with_heads(
        input_shape: Vec<usize>,
        embedding_dim: usize,
        layers: Vec<LayerSpec>,
        heads: Vec<HeadBranch>,
        weights: BTreeMap<String, Tensor>,
    ) -> Result<Self, InferError> {
        let model = Self {
            input_shape,
            embedding_dim,
            layers,
            heads,
            weights,
            quant: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn heads(&self) -> &[HeadBranch] {
        &self.heads
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.get(name)
    }

    pub fn activation_scales(&self) -> Option<&ActivationScales> {
        self.quant.as_ref()
    }

    pub fn is_quantized(&self) -> bool {
        self.quant.is_some()
    }

    /// Checks weight references and runs shape inference over trunk and heads.
    pub(crate) fn validate(&self) -> Result<(), InferError> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(InferError::ShapeMismatch {
                layer: "input".into(),
                detail: format!("invalid input shape {:?}", self.input_shape),
            });
        }
        if self.embedding_dim == 0 {
            return Err(InferError::ShapeMismatch {
                layer: "output".into(),
                detail: "embedding_dim must be positive".into(),
            });
        }
        let shapes = self.trunk_shapes()?;
        for (h, head) in self.heads.iter().enumerate() {
            let start = shapes
                .get(head.tap)
                .ok_or_else(|| InferError::ShapeMismatch {
                    layer: format!("head {h}"),
                    detail: format!("tap {} beyond {} trunk layers", head.tap, self.layers.len()),
                })?;
            let mut shape = start.clone();
            for (i, layer) in head.layers.iter().enumerate() {
                shape = self.infer_shape(layer, &shape, &format!("head {h} layer {i}"))?;
            }
        }
        if self.heads.is_empty() {
            let out = shapes.last().expect("input shape is always present");
            let per_item: usize = out[1..].iter().product();
            if per_item != self.embedding_dim {
                return Err(InferError::ShapeMismatch {
                    layer: "output".into(),
                    detail: format!(
                        "final output {out:?} has {per_item} features, embedding_dim is {}",
                        self.embedding_dim
                    ),
                });
            }
        }
        if let Some(q) = &self.quant {
            if q.layer_scales.len() != self.layers.len() {
                return Err(InferError::ShapeMismatch {
                    layer: "quant".into(),
                    detail: format!(
                        "{} activation scales for {} layers",
                        q.layer_scales.len(),
                        self.layers.len()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Activation shapes: entry 0 is the input, entry k the output of layer k-1.
    pub(crate) fn trunk_shapes(&self) -> Result<Vec<Vec<usize>>, InferError> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = self.infer_shape(layer, shapes.last().unwrap(), &format!("layer {i}"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    fn tensor(&self, name: &str, at: &str) -> Result<&Tensor, InferError> {
        self.weights
            .get(name)
            .ok_or_else(|| InferError::UnresolvedWeight {
                layer: at.to_string(),
                name: name.to_string(),
            })
    }

    fn expect_shape(&self, name: &str, want: &[usize], at: &str) -> Result<&Tensor, InferError> {
        let t = self.tensor(name, at)?;
        if t.shape() != want {
            return Err(InferError::ShapeMismatch {
                layer: at.to_string(),
                detail: format!("tensor {name:?} is {:?}, expected {want:?}", t.shape()),
            });
        }
        Ok(t)
    }

    fn expect_bias(&self, name: &str, channels: usize, at: &str) -> Result<(), InferError> {
        let t = self.expect_shape(name, &[channels], at)?;
        if t.dtype() != DType::F32 {
            return Err(InferError::ShapeMismatch {
                layer: at.to_string(),
                detail: format!("bias {name:?} must be f32"),
            });
        }
        Ok(())
    }

    fn infer_shape(
        &self,
        layer: &LayerSpec,
        input: &[usize],
        at: &str,
    ) -> Result<Vec<usize>, InferError> {
        let mismatch = |detail: String| InferError::ShapeMismatch {
            layer: format!("{at} ({})", layer.kind()),
            detail,
        };
        for r in layer.weight_refs() {
            self.tensor(r, at)?;
        }
        let need_channels = |c: usize| -> Result<(), InferError> {
            if input.len() < 2 || input[1] != c {
                return Err(mismatch(format!(
                    "expects {c} channels, input is {input:?}"
                )));
            }
            Ok(())
        };
        let conv_out =
            |k: usize, stride: usize, pad: usize| -> Result<(usize, usize), InferError> {
                if input.len() != 4 {
                    return Err(mismatch(format!("expects NCHW input, got {input:?}")));
                }
                match (
                    conv_out_dim(input[2], k, stride, pad),
                    conv_out_dim(input[3], k, stride, pad),
                ) {
                    (Some(h), Some(w)) => Ok((h, w)),
                    _ => Err(mismatch(format!(
                        "kernel {k} stride {stride} pad {pad} does not fit {input:?}"
                    ))),
                }
            };
        match layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            } => {
                need_channels(*in_channels)?;
                let (h, w) = conv_out(*kernel, *stride, *padding)?;
                self.expect_shape(weight, &[*out_channels, *in_channels, *kernel, *kernel], at)?;
                if let Some(b) = bias {
                    self.expect_bias(b, *out_channels, at)?;
                }
                Ok(vec![input[0], *out_channels, h, w])
            }
            LayerSpec::DepthwiseConv2d {
                channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            } => {
                need_channels(*channels)?;
                let (h, w) = conv_out(*kernel, *stride, *padding)?;
                self.expect_shape(weight, &[*channels, 1, *kernel, *kernel], at)?;
                if let Some(b) = bias {
                    self.expect_bias(b, *channels, at)?;
                }
                Ok(vec![input[0], *channels, h, w])
            }
            LayerSpec::GlobalDepthwise {
                channels,
                weight,
                bias,
            } => {
                need_channels(*channels)?;
                if input.len() != 4 {
                    return Err(mismatch(format!("expects NCHW input, got {input:?}")));
                }
                self.expect_shape(weight, &[*channels, 1, input[2], input[3]], at)?;
                if let Some(b) = bias {
                    self.expect_bias(b, *channels, at)?;
                }
                Ok(vec![input[0], *channels, 1, 1])
            }
            LayerSpec::Linear {
                in_features,
                out_features,
                weight,
                bias,
            } => {
                if input.len() != 2 || input[1] != *in_features {
                    return Err(mismatch(format!(
                        "expects (N, {in_features}), got {input:?}"
                    )));
                }
                self.expect_shape(weight, &[*out_features, *in_features], at)?;
                if let Some(b) = bias {
                    self.expect_bias(b, *out_features, at)?;
                }
                Ok(vec![input[0], *out_features])
            }
            LayerSpec::Prelu { channels, alpha } => {
                need_channels(*channels)?;
                self.expect_shape(alpha, &[*channels], at)?;
                Ok(input.to_vec())
            }
            LayerSpec::AddBias { channels, bias } => {
                need_channels(*channels)?;
                self.expect_bias(bias, *channels, at)?;
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input[0], input[1..].iter().product()]),
            LayerSpec::L2Norm => Ok(input.to_vec()),
        }
    }

    pub(crate) fn check_input(&self, input: &Tensor) -> Result<(), InferError> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(InferError::InvalidInput(format!(
                "input shape {:?} != model input shape {:?}",
                input.shape(),
                self.input_shape
            )));
        }
        if input.dtype() != DType::F32 {
            return Err(InferError::InvalidInput("input must be f32".into()));
        }
        Ok(())
    }

    fn check_float_weights(&self) -> Result<(), InferError> {
        if self.quant.is_some() || self.weights.values().any(|t| t.dtype() == DType::I8) {
            return Err(InferError::QuantizedWeights);
        }
        Ok(())
    }

    pub(crate) fn run_layer_f32(&self, layer: &LayerSpec, x: Tensor) -> Result<Tensor, InferError> {
        let w = |name: &str| -> &Tensor { &self.weights[name] };
        let b = |name: &Option<String>| name.as_deref().map(w);
        match layer {
            LayerSpec::Conv2d {
                stride,
                padding,
                weight,
                bias,
                ..
            } => ops::conv2d_f32(&x, w(weight), b(bias), *stride, *padding),
            LayerSpec::DepthwiseConv2d {
                stride,
                padding,
                weight,
                bias,
                ..
            } => ops::depthwise_conv2d_f32(&x, w(weight), b(bias), *stride, *padding),
            LayerSpec::GlobalDepthwise { weight, bias, .. } => {
                ops::global_depthwise_f32(&x, w(weight), b(bias))
            }
            LayerSpec::Linear { weight, bias, .. } => ops::linear_f32(&x, w(weight), b(bias)),
            LayerSpec::Prelu { alpha, .. } => ops::prelu_f32(&x, w(alpha)),
            LayerSpec::AddBias { bias, .. } => ops::add_bias_f32(&x, w(bias)),
            LayerSpec::Flatten => ops::flatten(x),
            LayerSpec::L2Norm => ops::l2norm_f32(&x),
        }
    }
}

/// Runs the trunk with f32 arithmetic and returns its final activation.
pub fn forward_f32(model: &Model, input: &Tensor) -> Result<Tensor, InferError> {
    model.check_float_weights()?;
    model.check_input(input)?;
    model
        .layers
        .iter()
        .try_fold(input.clone(), |x, layer| model.run_layer_f32(layer, x))
}

/// Runs the trunk once and returns every head branch output in declaration
/// order. A model without heads yields its trunk output as the only entry.
pub fn forward_heads_f32(model: &Model, input: &Tensor) -> Result<Vec<Tensor>, InferError> {
    if model.heads.is_empty() {
        return Ok(vec![forward_f32(model, input)?]);
    }
    model.check_float_weights()?;
    model.check_input(input)?;
    let mut taps: BTreeMap<usize, Tensor> = BTreeMap::new();
    let wanted: Vec<usize> = model.heads.iter().map(|h| h.tap).collect();
    let mut x = input.clone();
    if wanted.contains(&0) {
        taps.insert(0, x.clone());
    }
    let last_tap = wanted.iter().copied().max().unwrap_or(0);
    for (i, layer) in model.layers.iter().enumerate().take(last_tap) {
        x = model.run_layer_f32(layer, x)?;
        if wanted.contains(&(i + 1)) {
            taps.insert(i + 1, x.clone());
        }
    }
    model
        .heads
        .iter()
        .map(|head| {
            head.layers
                .iter()
                .try_fold(taps[&head.tap].clone(), |x, layer| {
                    model.run_layer_f32(layer, x)
                })
        })
        .collect()
}

/// FLOPs with one multiply-accumulate counted as 2. Element-wise layers are free.
pub fn count_flops(model: &Model) -> u64 {
    let Ok(shapes) = model.trunk_shapes() else {
        return 0;
    };
    let count = |layers: &[LayerSpec], start: &[usize]| -> u64 {
        let mut shape = start.to_vec();
        let mut total = 0;
        for layer in layers {
            let Ok(next) = model.infer_shape(layer, &shape, "flops") else {
                return total;
            };
            let out_elems: usize = next.iter().product();
            total += 2 * out_elems as u64 * layer.macs_per_output(&shape);
            shape = next;
        }
        total
    };
    let mut total = count(&model.layers, &shapes[0]);
    for head in &model.heads {
        total += count(&head.layers, &shapes[head.tap]);
    }
    total
}
