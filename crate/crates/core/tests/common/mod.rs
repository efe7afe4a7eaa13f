//! Independent reference implementations used to check the library.
//!
//! Every oracle here is written from the definition, in f64, without calling
//! the routine it checks.

#![allow(dead_code)]

use facepipe::detect::Detection;
use facepipe::infer::{LayerSpec, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- boxes / NMS

pub fn oracle_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `a` outranks `b`: higher score, then smaller x1, then smaller y1.
fn outranks(a: &Detection, b: &Detection) -> bool {
    (a.score, -a.bbox[0], -a.bbox[1]) > (b.score, -b.bbox[0], -b.bbox[1])
}

/// Full ranking including input position for exact ties.
fn ahead(dets: &[Detection], j: usize, i: usize) -> bool {
    outranks(&dets[j], &dets[i]) || (j < i && !outranks(&dets[i], &dets[j]))
}

/// Exhaustive suppression: the kept set is the unique fixed point of
/// "kept iff no kept detection that outranks it overlaps at >= thresh",
/// found by iterating the rule over all detections until nothing changes.
pub fn oracle_nms(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let n = dets.len();
    let mut keep = vec![true; n];
    loop {
        let next: Vec<bool> = (0..n)
            .map(|i| {
                !(0..n).any(|j| {
                    j != i
                        && keep[j]
                        && ahead(dets, j, i)
                        && oracle_iou(&dets[i].bbox, &dets[j].bbox) >= thresh
                })
            })
            .collect();
        if next == keep {
            break;
        }
        keep = next;
    }
    let mut idx: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    // insertion sort by rank, written out to stay independent of sort_by
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && ahead(dets, idx[j], idx[j - 1]) {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    idx.into_iter().map(|i| dets[i].clone()).collect()
}

pub fn random_detections(rng: &mut ChaCha8Rng, max: usize) -> Vec<Detection> {
    let n = rng.gen_range(0..=max);
    (0..n)
        .map(|_| {
            let x1 = rng.gen_range(0.0..80.0);
            let y1 = rng.gen_range(0.0..80.0);
            let w = rng.gen_range(1.0..40.0);
            let h = rng.gen_range(1.0..40.0);
            // coarse scores so ties (and the positional tie-break) occur
            let score = if rng.gen_bool(0.3) {
                rng.gen_range(0..4) as f64 / 4.0
            } else {
                rng.gen_range(0.0..1.0)
            };
            Detection {
                bbox: [x1, y1, x1 + w, y1 + h],
                score,
                landmarks: [[0.0; 2]; 5],
            }
        })
        .collect()
}

// ------------------------------------------------------------------ decoding

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Box, score and landmarks for one anchor of one cell, straight from the
/// head equations.
pub fn oracle_decode(
    logits: &[f64; 16],
    cell_row: usize,
    cell_col: usize,
    stride: f64,
    anchor: (f64, f64),
) -> ([f64; 4], f64, [[f64; 2]; 5]) {
    let (i, j) = (cell_row as f64, cell_col as f64);
    let cx = (sigmoid(logits[0]) * 2.0 - 0.5 + j) * stride;
    let cy = (sigmoid(logits[1]) * 2.0 - 0.5 + i) * stride;
    let w = (sigmoid(logits[2]) * 2.0).powi(2) * anchor.0;
    let h = (sigmoid(logits[3]) * 2.0).powi(2) * anchor.1;
    let score = sigmoid(logits[4]) * sigmoid(logits[15]);
    let mut lm = [[0.0; 2]; 5];
    for (k, p) in lm.iter_mut().enumerate() {
        *p = [
            logits[5 + 2 * k] * anchor.0 + j * stride,
            logits[6 + 2 * k] * anchor.1 + i * stride,
        ];
    }
    (
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0],
        score,
        lm,
    )
}

// ---------------------------------------------------------------- similarity

/// Least-squares similarity via the 4x4 normal equations of
/// `[x -y 1 0; y x 0 1] [a b tx ty]^T = [x' y']^T`, solved by Gaussian
/// elimination with partial pivoting.
pub fn oracle_similarity(src: &[[f64; 2]], dst: &[[f64; 2]]) -> [f64; 4] {
    let mut m = [[0.0f64; 5]; 4];
    for (s, d) in src.iter().zip(dst) {
        let rows = [
            ([s[0], -s[1], 1.0, 0.0], d[0]),
            ([s[1], s[0], 0.0, 1.0], d[1]),
        ];
        for (r, rhs) in rows {
            for p in 0..4 {
                for q in 0..4 {
                    m[p][q] += r[p] * r[q];
                }
                m[p][4] += r[p] * rhs;
            }
        }
    }
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        m.swap(col, piv);
        for r in 0..4 {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..5 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    [
        m[0][4] / m[0][0],
        m[1][4] / m[1][1],
        m[2][4] / m[2][2],
        m[3][4] / m[3][3],
    ]
}

pub fn similarity_residual(p: &[f64; 4], src: &[[f64; 2]], dst: &[[f64; 2]]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(s, d)| {
            let x = p[0] * s[0] - p[1] * s[1] + p[2];
            let y = p[1] * s[0] + p[0] * s[1] + p[3];
            (x - d[0]).powi(2) + (y - d[1]).powi(2)
        })
        .sum()
}

// ----------------------------------------------------------------- inference

/// Direct-loop f64 evaluation of a trunk-only, batch-1 model.
pub fn oracle_forward(model: &Model, input: &[f64]) -> Vec<f64> {
    let w = |name: &str| -> Vec<f64> {
        model
            .weight(name)
            .expect("weight present")
            .to_f32_vec()
            .into_iter()
            .map(f64::from)
            .collect()
    };
    let mut shape = model.input_shape().to_vec();
    let mut x = input.to_vec();
    for layer in model.layers() {
        match layer {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
                ..
            } => {
                let (c, h, wd) = (shape[1], shape[2], shape[3]);
                let (k, s, p) = (*kernel, *stride, *padding);
                let oh = (h + 2 * p - k) / s + 1;
                let ow = (wd + 2 * p - k) / s + 1;
                let wt = w(weight);
                let b = bias.as_deref().map(w);
                let mut y = vec![0.0; out_channels * oh * ow];
                for co in 0..*out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b.as_ref().map_or(0.0, |b| b[co]);
                            for ci in 0..c {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * s + ky) as isize - p as isize;
                                        let ix = (ox * s + kx) as isize - p as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xv = x[(ci * h + iy as usize) * wd + ix as usize];
                                        acc += xv * wt[((co * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                            y[(co * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                shape = vec![1, *out_channels, oh, ow];
                x = y;
            }
            LayerSpec::DepthwiseConv2d {
                kernel,
                stride,
                padding,
                weight,
                bias,
                ..
            } => {
                let (c, h, wd) = (shape[1], shape[2], shape[3]);
                let (k, s, p) = (*kernel, *stride, *padding);
                let oh = (h + 2 * p - k) / s + 1;
                let ow = (wd + 2 * p - k) / s + 1;
                let wt = w(weight);
                let b = bias.as_deref().map(w);
                let mut y = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b.as_ref().map_or(0.0, |b| b[ch]);
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x[(ch * h + iy as usize) * wd + ix as usize]
                                        * wt[(ch * k + ky) * k + kx];
                                }
                            }
                            y[(ch * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                shape = vec![1, c, oh, ow];
                x = y;
            }
            LayerSpec::GlobalDepthwise { weight, bias, .. } => {
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                let wt = w(weight);
                let b = bias.as_deref().map(w);
                x = (0..c)
                    .map(|ch| {
                        b.as_ref().map_or(0.0, |b| b[ch])
                            + (0..plane)
                                .map(|i| x[ch * plane + i] * wt[ch * plane + i])
                                .sum::<f64>()
                    })
                    .collect();
                shape = vec![1, c, 1, 1];
            }
            LayerSpec::Linear {
                in_features,
                out_features,
                weight,
                bias,
            } => {
                let wt = w(weight);
                let b = bias.as_deref().map(w);
                x = (0..*out_features)
                    .map(|o| {
                        b.as_ref().map_or(0.0, |b| b[o])
                            + (0..*in_features)
                                .map(|i| wt[o * in_features + i] * x[i])
                                .sum::<f64>()
                    })
                    .collect();
                shape = vec![1, *out_features];
            }
            LayerSpec::Prelu { alpha, .. } => {
                let a = w(alpha);
                let c = shape[1];
                let plane: usize = shape[2..].iter().product();
                for (i, v) in x.iter_mut().enumerate() {
                    if *v < 0.0 {
                        *v *= a[(i / plane) % c];
                    }
                }
            }
            LayerSpec::AddBias { bias, .. } => {
                let b = w(bias);
                let c = shape[1];
                let plane: usize = shape[2..].iter().product();
                for (i, v) in x.iter_mut().enumerate() {
                    *v += b[(i / plane) % c];
                }
            }
            LayerSpec::Flatten => shape = vec![1, x.len()],
            LayerSpec::L2Norm => {
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    x.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
    }
    x
}

pub fn random_input(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(0.0f32..1.0)).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else {
        dot / (na * nb)
    }
}

// ------------------------------------------------------------------------ AP

/// Brute-force AP: for every distinct score threshold (high to low) take the
/// detections scoring at least that much, match them greedily in rank order,
/// record (recall, precision), then integrate the upper envelope.
///
/// `dets` are (image, box, score) with ties broken by input order; `gt`
/// holds per-image (box, ignored) pairs.
pub fn oracle_ap(
    dets: &[(usize, [f64; 4], f64)],
    gt: &[Vec<([f64; 4], bool)>],
    thresh: f64,
) -> Option<f64> {
    let npos = gt.iter().flatten().filter(|g| !g.1).count();
    if npos == 0 {
        return None;
    }
    let mut levels: Vec<f64> = dets.iter().map(|d| d.2).collect();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for &t in &levels {
        // rank: score descending, stable on input index
        let mut chosen: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].2 >= t).collect();
        chosen.sort_by(|&a, &b| dets[b].2.total_cmp(&dets[a].2).then(a.cmp(&b)));
        let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
        let (mut tp, mut fp) = (0usize, 0usize);
        for &i in &chosen {
            let (img, b, _) = dets[i];
            let mut best: Option<(usize, f64)> = None;
            let mut ignored_hit = false;
            for (k, (g, ign)) in gt[img].iter().enumerate() {
                let o = oracle_iou(&b, g);
                if o >= thresh {
                    if *ign {
                        ignored_hit = true;
                    } else if !used[img][k] && best.is_none_or(|(_, bo)| o > bo) {
                        best = Some((k, o));
                    }
                }
            }
            if let Some((k, _)) = best {
                used[img][k] = true;
                tp += 1;
            } else if !ignored_hit {
                fp += 1;
            }
        }
        if tp + fp > 0 {
            curve.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (idx, &(r, _)) in curve.iter().enumerate() {
        let env = curve[idx..].iter().map(|c| c.1).fold(0.0, f64::max);
        ap += (r - prev_r) * env;
        prev_r = r;
    }
    Some(ap)
}

/// Up to 10 images with up to 10 GT boxes and detections each.
#[allow(clippy::type_complexity)]
pub fn random_ap_instance(
    rng: &mut ChaCha8Rng,
) -> (Vec<(usize, [f64; 4], f64)>, Vec<Vec<([f64; 4], bool)>>) {
    let images = rng.gen_range(1..=10);
    let mut gt = Vec::new();
    let mut dets = Vec::new();
    for img in 0..images {
        let n_gt = rng.gen_range(0..=10);
        let boxes: Vec<([f64; 4], bool)> = (0..n_gt)
            .map(|_| {
                let x = rng.gen_range(0.0..100.0);
                let y = rng.gen_range(0.0..100.0);
                (
                    [
                        x,
                        y,
                        x + rng.gen_range(5.0..30.0),
                        y + rng.gen_range(5.0..30.0),
                    ],
                    rng.gen_bool(0.15),
                )
            })
            .collect();
        for _ in 0..rng.gen_range(0..=10) {
            let b = if !boxes.is_empty() && rng.gen_bool(0.6) {
                let g = boxes[rng.gen_range(0..boxes.len())].0;
                let j = |r: &mut ChaCha8Rng| r.gen_range(-2.0..2.0);
                [g[0] + j(rng), g[1] + j(rng), g[2] + j(rng), g[3] + j(rng)]
            } else {
                let x = rng.gen_range(0.0..100.0);
                let y = rng.gen_range(0.0..100.0);
                [
                    x,
                    y,
                    x + rng.gen_range(5.0..30.0),
                    y + rng.gen_range(5.0..30.0),
                ]
            };
            // a small score alphabet produces ties
            let score = rng.gen_range(1..=12) as f64 / 12.0;
            dets.push((img, b, score));
        }
        gt.push(boxes);
    }
    (dets, gt)
}

// ----------------------------------------------------------------------- CLI

pub fn facepipe<I, S>(args: I) -> std::process::Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    std::process::Command::new(env!("CARGO_BIN_EXE_facepipe"))
        .args(args)
        .output()
        .expect("spawn facepipe")
}

/// A temp directory populated by `facepipe fixtures`.
pub fn fixture_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = facepipe(["fixtures", "--out", dir.path().to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    dir
}

/// Detection and ground-truth files whose AP at IoU 0.5 is 5/6: a hit, a
/// false positive, then the second hit.
pub fn write_five_sixths(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let det = |b: [f64; 4], s: f64| serde_json::json!({ "box": b, "score": s, "landmarks": [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]] });
    let dets = serde_json::json!({
        "image": "img0",
        "width": 200,
        "height": 200,
        "detections": [
            det([0.0, 0.0, 10.0, 10.0], 0.9),
            det([100.0, 100.0, 110.0, 110.0], 0.8),
            det([20.0, 20.0, 30.0, 30.0], 0.7),
        ],
    });
    let gt = serde_json::json!({
        "images": [{ "image": "img0", "boxes": [[0.0, 0.0, 10.0, 10.0], [20.0, 20.0, 30.0, 30.0]] }],
    });
    let (d, g) = (dir.join("dets.json"), dir.join("gt.json"));
    std::fs::write(&d, dets.to_string()).unwrap();
    std::fs::write(&g, gt.to_string()).unwrap();
    (d, g)
}
