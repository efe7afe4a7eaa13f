//! Face detector post-processing: anchor decoding of YOLOv5-face style heads,
//! greedy NMS, and mapping boxes back from the letterboxed canvas.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infer::{forward_heads_f32, InferError, Model};
use crate::tensor::{letterbox, normalize_to_tensor, Image, LetterboxMeta, Tensor, TensorError};

/// Channels per anchor: 4 box + 1 objectness + 10 landmark + 1 class.
pub const CHANNELS_PER_ANCHOR: usize = 16;

pub const DEFAULT_CONF_THRESH: f64 = 0.5;
pub const DEFAULT_IOU_THRESH: f64 = 0.45;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("head output shape {shape:?} does not match {anchors} anchors x 16 channels")]
    HeadShape { shape: Vec<usize>, anchors: usize },
    #[error("no anchors configured for stride {0}")]
    MissingAnchors(usize),
    #[error(
        "detector input size {input}x{input_h} is not divisible by head grid {grid_w}x{grid_h}"
    )]
    StrideMismatch {
        input: usize,
        input_h: usize,
        grid_w: usize,
        grid_h: usize,
    },
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Axis-aligned box `[x1, y1, x2, y2]` in pixels.
pub type BBox = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    /// Left eye, right eye, nose, left mouth corner, right mouth corner.
    pub landmarks: [[f64; 2]; 5],
}

/// One detector output scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub stride: usize,
    /// Prior box sizes `(width, height)` in input pixels.
    pub anchors: Vec<(f64, f64)>,
}

pub fn default_heads() -> Vec<HeadSpec> {
    vec![
        HeadSpec {
            stride: 8,
            anchors: vec![(4.0, 5.0), (8.0, 10.0), (13.0, 16.0)],
        },
        HeadSpec {
            stride: 16,
            anchors: vec![(23.0, 29.0), (43.0, 55.0), (73.0, 105.0)],
        },
        HeadSpec {
            stride: 32,
            anchors: vec![(146.0, 217.0), (231.0, 300.0), (335.0, 433.0)],
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub heads: Vec<HeadSpec>,
    pub fill: u8,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            conf_thresh: DEFAULT_CONF_THRESH,
            iou_thresh: DEFAULT_IOU_THRESH,
            heads: default_heads(),
            fill: crate::tensor::DEFAULT_LETTERBOX_FILL,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes one head tensor `(1, A*16, H, W)` into detections in letterboxed
/// coordinates, keeping those with `score >= conf_thresh`.
pub fn decode_head(
    raw: &Tensor,
    head: &HeadSpec,
    conf_thresh: f64,
) -> Result<Vec<Detection>, DetectError> {
    let num_anchors = head.anchors.len();
    let (gh, gw) = match *raw.shape() {
        [1, c, h, w] if c == num_anchors * CHANNELS_PER_ANCHOR && num_anchors > 0 => (h, w),
        _ => {
            return Err(DetectError::HeadShape {
                shape: raw.shape().to_vec(),
                anchors: num_anchors,
            })
        }
    };
    let data = raw.as_f32()?;
    let plane = gh * gw;
    let s = head.stride as f64;
    let mut out = Vec::new();
    for (a, &(aw, ah)) in head.anchors.iter().enumerate() {
        let base = a * CHANNELS_PER_ANCHOR * plane;
        let ch = |c: usize, cell: usize| data[base + c * plane + cell] as f64;
        for i in 0..gh {
            for j in 0..gw {
                let cell = i * gw + j;
                let score = sigmoid(ch(4, cell)) * sigmoid(ch(15, cell));
                if score < conf_thresh {
                    continue;
                }
                let cx = (2.0 * sigmoid(ch(0, cell)) - 0.5 + j as f64) * s;
                let cy = (2.0 * sigmoid(ch(1, cell)) - 0.5 + i as f64) * s;
                let w = (2.0 * sigmoid(ch(2, cell))).powi(2) * aw;
                let h = (2.0 * sigmoid(ch(3, cell))).powi(2) * ah;
                if !(w > 0.0 && h > 0.0) {
                    continue;
                }
                let mut landmarks = [[0.0; 2]; 5];
                for (k, lm) in landmarks.iter_mut().enumerate() {
                    lm[0] = ch(5 + 2 * k, cell) * aw + j as f64 * s;
                    lm[1] = ch(6 + 2 * k, cell) * ah + i as f64 * s;
                }
                out.push(Detection {
                    bbox: [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0],
                    score,
                    landmarks,
                });
            }
        }
    }
    Ok(out)
}

pub fn area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Total order used for suppression: score descending, then smaller `x1`,
/// then smaller `y1`.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox[0].total_cmp(&b.bbox[0]))
        .then(a.bbox[1].total_cmp(&b.bbox[1]))
}

/// Greedy non-maximum suppression: walking detections in rank order, keep
/// one iff its IoU with every already-kept detection is below `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Maps letterboxed coordinates back to the source image and clamps them to
/// `[0, width] x [0, height]`. Boxes that collapse after clamping are dropped.
pub fn unmap_coords(dets: Vec<Detection>, meta: &LetterboxMeta) -> Vec<Detection> {
    let (w, h) = (meta.src_width as f64, meta.src_height as f64);
    let ux = |x: f64| ((x - meta.pad_left) / meta.scale).clamp(0.0, w);
    let uy = |y: f64| ((y - meta.pad_top) / meta.scale).clamp(0.0, h);
    dets.into_iter()
        .filter_map(|d| {
            let bbox = [ux(d.bbox[0]), uy(d.bbox[1]), ux(d.bbox[2]), uy(d.bbox[3])];
            if !(bbox[0] < bbox[2] && bbox[1] < bbox[3]) {
                return None;
            }
            let landmarks = d.landmarks.map(|[x, y]| [ux(x), uy(y)]);
            Some(Detection {
                bbox,
                score: d.score.clamp(0.0, 1.0),
                landmarks,
            })
        })
        .collect()
}

/// Wall-clock split of one detector call.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DetectTimings {
    /// Letterbox and normalization.
    pub pre: Duration,
    pub forward: Duration,
    /// Decode, NMS and unmapping.
    pub post: Duration,
}

pub fn detect_faces(
    model: &Model,
    img: &Image,
    params: &DetectorParams,
) -> Result<Vec<Detection>, DetectError> {
    detect_faces_timed(model, img, params).map(|(d, _)| d)
}

/// letterbox -> normalize -> forward -> decode every head -> NMS -> unmap.
pub fn detect_faces_timed(
    model: &Model,
    img: &Image,
    params: &DetectorParams,
) -> Result<(Vec<Detection>, DetectTimings), DetectError> {
    let t0 = Instant::now();
    let (in_h, in_w) = match *model.input_shape() {
        [1, 3, h, w] => (h, w),
        ref s => {
            return Err(DetectError::Infer(InferError::InvalidInput(format!(
                "detector input must be (1, 3, H, W), model declares {s:?}"
            ))))
        }
    };
    let (canvas, meta) = letterbox(img, in_w, in_h, params.fill)?;
    let input = normalize_to_tensor(&canvas);
    let t1 = Instant::now();
    let outputs = forward_heads_f32(model, &input)?;
    let t2 = Instant::now();

    let mut candidates = Vec::new();
    for raw in &outputs {
        let (gh, gw) = match *raw.shape() {
            [_, _, h, w] => (h, w),
            _ => {
                return Err(DetectError::HeadShape {
                    shape: raw.shape().to_vec(),
                    anchors: 0,
                })
            }
        };
        if in_w % gw != 0 || in_h % gh != 0 || in_w / gw != in_h / gh {
            return Err(DetectError::StrideMismatch {
                input: in_w,
                input_h: in_h,
                grid_w: gw,
                grid_h: gh,
            });
        }
        let stride = in_w / gw;
        let head = params
            .heads
            .iter()
            .find(|h| h.stride == stride)
            .ok_or(DetectError::MissingAnchors(stride))?;
        candidates.extend(decode_head(raw, head, params.conf_thresh)?);
    }
    let kept = nms(candidates, params.iou_thresh);
    let dets = unmap_coords(kept, &meta);
    let t3 = Instant::now();
    Ok((
        dets,
        DetectTimings {
            pre: t1 - t0,
            forward: t2 - t1,
            post: t3 - t2,
        },
    ))
}

/// Per-image detection interchange document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub detections: Vec<Detection>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(b: BBox, score: f64) -> Detection {
        Detection {
            bbox: b,
            score,
            landmarks: [[b[0], b[1]]; 5],
        }
    }

    fn head_tensor(
        anchors: usize,
        h: usize,
        w: usize,
        fill: impl Fn(usize, usize, usize, usize) -> f32,
    ) -> Tensor {
        let mut data = vec![0f32; anchors * 16 * h * w];
        for a in 0..anchors {
            for c in 0..16 {
                for i in 0..h {
                    for j in 0..w {
                        data[((a * 16 + c) * h + i) * w + j] = fill(a, c, i, j);
                    }
                }
            }
        }
        Tensor::from_f32(vec![1, anchors * 16, h, w], data).unwrap()
    }

    #[test]
    fn zero_offsets_decode_to_anchor_size_at_cell_center() {
        let head = HeadSpec {
            stride: 8,
            anchors: vec![(10.0, 20.0)],
        };
        let raw = head_tensor(1, 2, 2, |_, c, i, j| match c {
            4 | 15 if i == 0 && j == 0 => 20.0,
            4 | 15 => -20.0,
            _ => 0.0,
        });
        let dets = decode_head(&raw, &head, 0.5).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert_eq!(d.bbox, [4.0 - 5.0, 4.0 - 10.0, 4.0 + 5.0, 4.0 + 10.0]);
        assert!((d.score - 1.0).abs() < 1e-8);
        assert_eq!(d.landmarks, [[0.0, 0.0]; 5]);
    }

    #[test]
    fn landmark_offsets_scale_with_anchor() {
        let head = HeadSpec {
            stride: 16,
            anchors: vec![(4.0, 2.0)],
        };
        let raw = head_tensor(1, 3, 3, |_, c, i, j| match c {
            4 | 15 => {
                if i == 1 && j == 2 {
                    5.0
                } else {
                    -30.0
                }
            }
            5 => 0.5,
            6 => -1.0,
            _ => 0.0,
        });
        let dets = decode_head(&raw, &head, 0.5).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].landmarks[0], [0.5 * 4.0 + 2.0 * 16.0, -2.0 + 16.0]);
    }

    #[test]
    fn wrong_channel_count() {
        let head = HeadSpec {
            stride: 8,
            anchors: vec![(1.0, 1.0); 2],
        };
        let raw = head_tensor(1, 1, 1, |_, _, _, _| 0.0);
        assert!(matches!(
            decode_head(&raw, &head, 0.5),
            Err(DetectError::HeadShape { .. })
        ));
    }

    #[test]
    fn iou_cases() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[5.0, 5.0, 6.0, 6.0]), 0.0);
        assert!((iou(&a, &[1.0, 1.0, 3.0, 3.0]) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn nms_cases() {
        let one = vec![det([0.0, 0.0, 1.0, 1.0], 0.3)];
        assert_eq!(nms(one.clone(), 0.45), one);
        let b = [0.0, 0.0, 10.0, 10.0];
        let kept = nms(vec![det(b, 0.8), det(b, 0.9)], 0.45);
        assert_eq!(kept, vec![det(b, 0.9)]);
    }

    #[test]
    fn nms_tie_break_is_total() {
        let a = det([1.0, 0.0, 3.0, 2.0], 0.5);
        let b = det([0.0, 5.0, 2.0, 7.0], 0.5);
        let c = det([0.0, 1.0, 2.0, 3.0], 0.5);
        let out = nms(vec![a.clone(), b.clone(), c.clone()], 0.99);
        assert_eq!(out, vec![c, b, a]);
    }

    #[test]
    fn unmap_cases() {
        let d = det([10.0, 20.0, 30.0, 40.0], 0.9);
        let id = LetterboxMeta::identity(100, 100);
        assert_eq!(unmap_coords(vec![d.clone()], &id), vec![d]);

        let meta = LetterboxMeta {
            scale: 0.5,
            pad_left: 0.0,
            pad_top: 140.0,
            src_width: 1280,
            src_height: 720,
        };
        let out = unmap_coords(vec![det([0.0, 140.0, 10.0, 150.0], 0.9)], &meta);
        assert_eq!(out[0].bbox, [0.0, 0.0, 20.0, 20.0]);
        let out = unmap_coords(vec![det([0.0, 139.0, 10.0, 150.0], 0.9)], &meta);
        assert_eq!(out[0].bbox[1], 0.0);
        // entirely inside the padding band
        assert!(unmap_coords(vec![det([0.0, 0.0, 10.0, 100.0], 0.9)], &meta).is_empty());
    }

    proptest! {
        #[test]
        fn objectness_monotone(t in -30.0f64..30.0, dt in 0.0f64..5.0, cls in -5.0f32..5.0) {
            let head = HeadSpec { stride: 8, anchors: vec![(8.0, 8.0)] };
            let score_at = |obj: f64| {
                let raw = head_tensor(1, 1, 1, |_, c, _, _| match c {
                    4 => obj as f32,
                    15 => cls,
                    _ => 0.0,
                });
                decode_head(&raw, &head, 0.0).unwrap()[0].score
            };
            prop_assert!(score_at(t + dt) >= score_at(t));
        }

        #[test]
        fn decoded_boxes_satisfy_invariants(
            vals in proptest::collection::vec(-50.0f32..50.0, 16 * 2 * 2 * 2),
            scale in 0.2f64..3.0,
            pad in 0.0f64..40.0,
        ) {
            let head = HeadSpec { stride: 16, anchors: vec![(20.0, 30.0), (60.0, 40.0)] };
            let raw = Tensor::from_f32(vec![1, 32, 2, 2], vals).unwrap();
            let dets = decode_head(&raw, &head, 0.0).unwrap();
            let meta = LetterboxMeta { scale, pad_left: pad, pad_top: pad / 2.0, src_width: 50, src_height: 40 };
            for d in unmap_coords(nms(dets, 0.45), &meta) {
                prop_assert!(d.bbox[0] < d.bbox[2] && d.bbox[1] < d.bbox[3]);
                prop_assert!(d.bbox[0] >= 0.0 && d.bbox[2] <= 50.0);
                prop_assert!(d.bbox[1] >= 0.0 && d.bbox[3] <= 40.0);
                prop_assert!((0.0..=1.0).contains(&d.score));
            }
        }

        #[test]
        fn letterbox_mapping_inverts(
            w in 1usize..300, h in 1usize..300,
            fx in 0.0f64..1.0, fy in 0.0f64..1.0,
        ) {
            let img = Image::filled(w, h, [0; 3]).unwrap();
            let (_, meta) = letterbox(&img, 64, 64, 0).unwrap();
            let (px, py) = (fx * w as f64, fy * h as f64);
            let (lx, ly) = meta.map_point(px, py);
            let (lx2, ly2) = meta.map_point(px + 1.0, py + 1.0);
            let d = Detection { bbox: [lx, ly, lx2, ly2], score: 1.0, landmarks: [[lx, ly]; 5] };
            let back = unmap_coords(vec![d], &meta);
            let b = back[0].bbox;
            prop_assert!((b[0] - px).abs() < 0.51 && (b[1] - py).abs() < 0.51);
            prop_assert!((back[0].landmarks[0][0] - px).abs() < 0.51);
        }
    }
}
