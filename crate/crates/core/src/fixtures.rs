//! Deterministic stand-ins for trained networks and camera frames.
//!
//! The detector fixture responds to bright 32x32 blocks aligned to its
//! stride-32 grid: such a block yields one detection whose landmarks frame the
//! block like a face on the alignment template. The embedder fixture is a
//! small randomly initialised MobileFaceNet-shaped network, so identical
//! crops give identical embeddings and different textures give different
//! ones.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::DEFAULT_TEMPLATE;
use crate::detect::{default_heads, BBox, CHANNELS_PER_ANCHOR};
use crate::infer::{HeadBranch, InferError, LayerSpec, Model};
use crate::tensor::{Image, Tensor};

pub const FRAME_SIZE: usize = 640;
pub const FACE_CELL: usize = 32;
pub const BACKGROUND: u8 = 20;
pub const EMBEDDER_SEED: u64 = 0x5eed_face;

/// Grid cells (row, col) of the stride-32 head that may hold a planted face.
/// Spaced so the 146x217 prior boxes never overlap enough to suppress each
/// other.
pub const FACE_SLOTS: [(usize, usize); 15] = [
    (2, 1),
    (2, 5),
    (2, 9),
    (2, 13),
    (2, 17),
    (9, 1),
    (9, 5),
    (9, 9),
    (9, 13),
    (9, 17),
    (16, 1),
    (16, 5),
    (16, 9),
    (16, 13),
    (16, 17),
];

/// Landmark spread: the template's 112 px map onto this many frame pixels,
/// a little under the block size so aligned crops never sample background.
const FACE_SPAN: f64 = 28.0;

fn f32_tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    Tensor::from_f32(shape, data).expect("fixture tensors are finite and well-shaped")
}

fn conv(
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        padding,
        weight: format!("{name}.w"),
        bias: bias.then(|| format!("{name}.b")),
    }
}

/// Three-scale detector on a `size` x `size` input (a multiple of 32).
pub fn detector_model(size: usize) -> Result<Model, InferError> {
    let mut w = BTreeMap::new();
    // trunk: 8x8 patch mean, then two 2x2 means
    w.insert(
        "s8.w".into(),
        f32_tensor(vec![1, 3, 8, 8], vec![1.0 / 192.0; 192]),
    );
    w.insert("s16.w".into(), f32_tensor(vec![1, 1, 2, 2], vec![0.25; 4]));
    w.insert("s32.w".into(), f32_tensor(vec![1, 1, 2, 2], vec![0.25; 4]));
    let layers = vec![
        conv("s8", 3, 1, 8, 8, 0, false),
        conv("s16", 1, 1, 2, 2, 0, false),
        conv("s32", 1, 1, 2, 2, 0, false),
    ];

    let heads_spec = default_heads();
    let mut heads = Vec::new();
    for (tap, spec) in (1..=3).zip(&heads_spec) {
        let name = format!("head{}", spec.stride);
        let n = spec.anchors.len() * CHANNELS_PER_ANCHOR;
        let mut weight = vec![0.0f32; n];
        let mut bias = vec![0.0f32; n];
        for a in 0..spec.anchors.len() {
            bias[a * CHANNELS_PER_ANCHOR + 4] = -20.0;
        }
        if spec.stride == FACE_CELL {
            let (aw, ah) = spec.anchors[0];
            // objectness turns on once the cell mean passes 0.75
            weight[4] = 40.0;
            bias[4] = -30.0;
            bias[15] = 20.0;
            let half = FACE_CELL as f64 / 2.0;
            for (k, [tx, ty]) in DEFAULT_TEMPLATE.iter().enumerate() {
                let lx = half + (tx - 56.0) * FACE_SPAN / 112.0;
                let ly = half + (ty - 56.0) * FACE_SPAN / 112.0;
                bias[5 + 2 * k] = (lx / aw) as f32;
                bias[6 + 2 * k] = (ly / ah) as f32;
            }
        }
        w.insert(format!("{name}.w"), f32_tensor(vec![n, 1, 1, 1], weight));
        w.insert(format!("{name}.b"), f32_tensor(vec![n], bias));
        heads.push(HeadBranch {
            tap,
            layers: vec![conv(&name, 1, n, 1, 1, 0, true)],
        });
    }
    Model::with_heads(
        vec![1, 3, size, size],
        CHANNELS_PER_ANCHOR,
        layers,
        heads,
        w,
    )
}

/// Uniform init in `±sqrt(3 / fan_in)` (unit-variance outputs for unit inputs).
fn init(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f32> {
    let bound = (3.0 / fan_in as f64).sqrt() as f32;
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn add(w: &mut BTreeMap<String, Tensor>, name: &str, shape: Vec<usize>, data: Vec<f32>) {
    w.insert(name.to_string(), f32_tensor(shape, data));
}

/// 112x112 -> 128-d embedder: stem conv, three depthwise-separable blocks,
/// global depthwise pooling, linear projection, L2 normalisation.
pub fn embedder_model(seed: u64) -> Result<Model, InferError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = BTreeMap::new();
    let mut layers = Vec::new();

    // centre the stem on typical face brightness so the pattern, not the
    // overall level, drives the embedding; no padding, since zero padding
    // would reintroduce the level along the border
    let stem_w = init(&mut rng, 8 * 27, 27);
    let stem_b: Vec<f32> = stem_w
        .chunks(27)
        .map(|k| -0.88 * k.iter().sum::<f32>())
        .collect();
    add(&mut w, "stem.w", vec![8, 3, 3, 3], stem_w);
    add(&mut w, "stem.b", vec![8], stem_b);
    add(&mut w, "stem.a", vec![8], vec![0.75; 8]);
    layers.push(conv("stem", 3, 8, 3, 2, 0, true));
    layers.push(LayerSpec::Prelu {
        channels: 8,
        alpha: "stem.a".into(),
    });

    let widths = [(8, 16), (16, 32), (32, 64)];
    for (i, &(cin, cout)) in widths.iter().enumerate() {
        let dw = format!("dw{i}");
        let pw = format!("pw{i}");
        add(
            &mut w,
            &format!("{dw}.w"),
            vec![cin, 1, 3, 3],
            init(&mut rng, cin * 9, 9),
        );
        add(
            &mut w,
            &format!("{pw}.w"),
            vec![cout, cin, 1, 1],
            init(&mut rng, cout * cin, cin),
        );
        add(&mut w, &format!("{pw}.b"), vec![cout], vec![0.0; cout]);
        layers.push(LayerSpec::DepthwiseConv2d {
            channels: cin,
            kernel: 3,
            stride: 2,
            padding: 1,
            weight: format!("{dw}.w"),
            bias: None,
        });
        layers.push(conv(&pw, cin, cout, 1, 1, 0, true));
        if i + 1 < widths.len() {
            add(&mut w, &format!("{pw}.a"), vec![cout], vec![0.75; cout]);
            layers.push(LayerSpec::Prelu {
                channels: cout,
                alpha: format!("{pw}.a"),
            });
        }
    }

    add(
        &mut w,
        "gdc.w",
        vec![64, 1, 7, 7],
        init(&mut rng, 64 * 49, 49),
    );
    layers.push(LayerSpec::GlobalDepthwise {
        channels: 64,
        weight: "gdc.w".into(),
        bias: None,
    });
    layers.push(LayerSpec::Flatten);
    add(&mut w, "fc.w", vec![128, 64], init(&mut rng, 128 * 64, 64));
    add(&mut w, "fc.b", vec![128], vec![0.0; 128]);
    layers.push(LayerSpec::Linear {
        in_features: 64,
        out_features: 128,
        weight: "fc.w".into(),
        bias: Some("fc.b".into()),
    });
    layers.push(LayerSpec::L2Norm);
    Model::new(vec![1, 3, 112, 112], 128, layers, w)
}

/// Random small network (at most 4 layers, 8 channels, 16x16 input, at
/// least 4 output values) built from the embedder operator family.
pub fn random_micro_net(rng: &mut ChaCha8Rng) -> Model {
    loop {
        if let Some(m) = try_micro_net(rng) {
            return m;
        }
    }
}

fn try_micro_net(rng: &mut ChaCha8Rng) -> Option<Model> {
    let c0 = rng.gen_range(1..=4);
    let h0 = rng.gen_range(4..=16);
    let w0 = rng.gen_range(4..=16);
    let mut shape = vec![1, c0, h0, w0];
    let mut w = BTreeMap::new();
    let mut layers = Vec::new();
    let n_layers = rng.gen_range(1..=4);
    for i in 0..n_layers {
        let name = format!("l{i}");
        let flat = shape.len() == 2;
        let choice = if flat {
            3 + rng.gen_range(0..2) * 2
        } else {
            rng.gen_range(0..6)
        };
        let c = shape[1];
        let layer = match choice {
            0 => {
                let cout = rng.gen_range(1..=8);
                let k = [1, 3][rng.gen_range(0..2)];
                let s = rng.gen_range(1..=2);
                let p = rng.gen_range(0..=k / 2);
                w.insert(
                    format!("{name}.w"),
                    f32_tensor(vec![cout, c, k, k], init(rng, cout * c * k * k, c * k * k)),
                );
                w.insert(
                    format!("{name}.b"),
                    f32_tensor(vec![cout], init(rng, cout, 4)),
                );
                conv(&name, c, cout, k, s, p, true)
            }
            1 => {
                let k = [1, 3][rng.gen_range(0..2)];
                let s = rng.gen_range(1..=2);
                let p = rng.gen_range(0..=k / 2);
                w.insert(
                    format!("{name}.w"),
                    f32_tensor(vec![c, 1, k, k], init(rng, c * k * k, k * k)),
                );
                LayerSpec::DepthwiseConv2d {
                    channels: c,
                    kernel: k,
                    stride: s,
                    padding: p,
                    weight: format!("{name}.w"),
                    bias: None,
                }
            }
            2 => {
                w.insert(
                    format!("{name}.a"),
                    f32_tensor(vec![c], (0..c).map(|_| rng.gen_range(0.0..0.5)).collect()),
                );
                LayerSpec::Prelu {
                    channels: c,
                    alpha: format!("{name}.a"),
                }
            }
            3 => {
                w.insert(format!("{name}.b"), f32_tensor(vec![c], init(rng, c, 4)));
                LayerSpec::AddBias {
                    channels: c,
                    bias: format!("{name}.b"),
                }
            }
            4 => LayerSpec::Flatten,
            _ => {
                let feats: usize = shape[1..].iter().product();
                let out = rng.gen_range(4..=16);
                let x = if flat { None } else { Some(LayerSpec::Flatten) };
                if let Some(f) = x {
                    // flatten and project count as two layers
                    if layers.len() + 2 > 4 {
                        return None;
                    }
                    layers.push(f);
                }
                w.insert(
                    format!("{name}.w"),
                    f32_tensor(vec![out, feats], init(rng, out * feats, feats)),
                );
                LayerSpec::Linear {
                    in_features: feats,
                    out_features: out,
                    weight: format!("{name}.w"),
                    bias: None,
                }
            }
        };
        layers.push(layer);
        if layers.len() > 4 {
            return None;
        }
        let probe = Model {
            input_shape: vec![1, c0, h0, w0],
            embedding_dim: 1,
            layers: layers.clone(),
            heads: Vec::new(),
            weights: w.clone(),
            quant: None,
        };
        shape = probe.trunk_shapes().ok()?.pop()?;
    }
    let dim: usize = shape[1..].iter().product();
    if dim < 4 {
        return None;
    }
    Model::new(vec![1, c0, h0, w0], dim, layers, w).ok()
}

/// Seeded face texture: a 32x32 block made of 8x8 coarse patches with
/// per-identity colours in 195..=255 plus a little fine noise. Every pixel
/// stays above the detector's objectness threshold.
pub fn face_texture(identity: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(identity ^ 0xface_0000);
    let grid = 8;
    let patch = FACE_CELL / grid;
    let colours: Vec<[u8; 3]> = (0..grid * grid)
        .map(|_| {
            [
                rng.gen_range(195..=251),
                rng.gen_range(195..=251),
                rng.gen_range(195..=251),
            ]
        })
        .collect();
    let mut img = Image::filled(FACE_CELL, FACE_CELL, [0; 3]).expect("non-zero size");
    for y in 0..FACE_CELL {
        for x in 0..FACE_CELL {
            let c = colours[(y / patch) * grid + x / patch];
            img.put(x, y, c.map(|v| v + rng.gen_range(0..=4)));
        }
    }
    img
}

/// Box the detector fixture reports for a face planted in `slot`, clipped to
/// the frame.
pub fn slot_box(slot: usize) -> BBox {
    let (i, j) = FACE_SLOTS[slot];
    let cx = (j as f64 + 0.5) * FACE_CELL as f64;
    let cy = (i as f64 + 0.5) * FACE_CELL as f64;
    let (aw, ah) = default_heads()[2].anchors[0];
    let clip = |v: f64| v.clamp(0.0, FRAME_SIZE as f64);
    [
        clip(cx - aw / 2.0),
        clip(cy - ah / 2.0),
        clip(cx + aw / 2.0),
        clip(cy + ah / 2.0),
    ]
}

/// A `FRAME_SIZE` square frame with `faces[k]`'s identity planted in slot `k`.
pub fn synthetic_frame(identities: &[u64]) -> Image {
    assert!(
        identities.len() <= FACE_SLOTS.len(),
        "at most {} faces per frame",
        FACE_SLOTS.len()
    );
    let mut frame = Image::filled(FRAME_SIZE, FRAME_SIZE, [BACKGROUND; 3]).expect("non-zero size");
    for (slot, &id) in identities.iter().enumerate() {
        let (i, j) = FACE_SLOTS[slot];
        let tex = face_texture(id);
        for y in 0..FACE_CELL {
            for x in 0..FACE_CELL {
                frame.put(j * FACE_CELL + x, i * FACE_CELL + y, tex.get(x, y));
            }
        }
    }
    frame
}

/// Frame with `k` faces whose identities are `0..k`.
pub fn frame_with_faces(k: usize) -> Image {
    synthetic_frame(&(0..k as u64).collect::<Vec<_>>())
}
