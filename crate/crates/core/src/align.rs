//! Five-point face alignment onto the canonical 112x112 template via a
//! least-squares similarity transform.

use thiserror::Error;

use crate::detect::{BBox, Detection};
use crate::tensor::{bilinear_sample, to_rgb8, Image, TensorError};

pub const ALIGNED_SIZE: usize = 112;

/// Reference landmark positions for a 112x112 crop (eyes, nose tip, mouth
/// corners), the coordinates in common use by ArcFace-family recognizers.
pub const DEFAULT_TEMPLATE: [[f64; 2]; 5] = [
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
];

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("need at least 2 matching point pairs, got {src} source and {dst} target")]
    PointCount { src: usize, dst: usize },
    #[error("source points are coincident")]
    DegenerateSource,
    #[error("transform has zero scale and cannot be inverted")]
    NonInvertible,
    #[error(transparent)]
    Image(#[from] TensorError),
}

/// `x' = a x - b y + tx`, `y' = b x + a y + ty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: Self = Self {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    /// Rotation angle in radians.
    pub fn rotation(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn apply(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        [
            self.a * x - self.b * y + self.tx,
            self.b * x + self.a * y + self.ty,
        ]
    }

    pub fn inverse(&self) -> Result<Self, AlignError> {
        let s2 = self.a * self.a + self.b * self.b;
        if !(s2 > 0.0) || !s2.is_finite() {
            return Err(AlignError::NonInvertible);
        }
        let (a, b) = (self.a / s2, -self.b / s2);
        Ok(Self {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        })
    }

    /// Sum of squared distances between mapped `src` and `dst`.
    pub fn residual(&self, src: &[[f64; 2]], dst: &[[f64; 2]]) -> f64 {
        src.iter()
            .zip(dst)
            .map(|(&p, q)| {
                let m = self.apply(p);
                (m[0] - q[0]).powi(2) + (m[1] - q[1]).powi(2)
            })
            .sum()
    }
}

/// Least-squares similarity transform taking `src` onto `dst`.
///
/// The four normal equations decouple once both point sets are centred, so
/// the solution is closed form: `a` and `b` are the centred cross terms over
/// the source spread, and the translation matches the centroids.
pub fn solve_similarity(
    src: &[[f64; 2]],
    dst: &[[f64; 2]],
) -> Result<SimilarityTransform, AlignError> {
    if src.len() != dst.len() || src.len() < 2 {
        return Err(AlignError::PointCount {
            src: src.len(),
            dst: dst.len(),
        });
    }
    let n = src.len() as f64;
    let mean = |pts: &[[f64; 2]]| {
        let s = pts
            .iter()
            .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        [s[0] / n, s[1] / n]
    };
    let (ms, md) = (mean(src), mean(dst));
    let (mut spread, mut dot, mut cross) = (0.0, 0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (x, y) = (p[0] - ms[0], p[1] - ms[1]);
        let (u, v) = (q[0] - md[0], q[1] - md[1]);
        spread += x * x + y * y;
        dot += x * u + y * v;
        cross += x * v - y * u;
    }
    let magnitude = src
        .iter()
        .map(|p| p[0] * p[0] + p[1] * p[1])
        .sum::<f64>()
        .max(1.0);
    if spread <= magnitude * 1e-20 {
        return Err(AlignError::DegenerateSource);
    }
    let a = dot / spread;
    let b = cross / spread;
    Ok(SimilarityTransform {
        a,
        b,
        tx: md[0] - (a * ms[0] - b * ms[1]),
        ty: md[1] - (b * ms[0] + a * ms[1]),
    })
}

/// Output pixel `(u, v)` samples the source at `T^-1(u, v)`; samples past the
/// border clamp to the edge.
pub fn warp_crop(
    img: &Image,
    t: &SimilarityTransform,
    out_w: usize,
    out_h: usize,
) -> Result<Image, AlignError> {
    let inv = t.inverse()?;
    let mut out = Image::filled(out_w, out_h, [0; 3])?;
    for v in 0..out_h {
        for u in 0..out_w {
            let [x, y] = inv.apply([u as f64, v as f64]);
            out.put(u, v, to_rgb8(bilinear_sample(img, x, y)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFace {
    pub image: Image,
    pub transform: SimilarityTransform,
    /// Mapped left eye lies left of the mapped right eye. `false` usually
    /// means the detector emitted landmarks in the wrong order.
    pub eyes_ordered: bool,
}

/// Solves the detection-to-template transform and warps a 112x112 crop.
pub fn align_face(
    img: &Image,
    det: &Detection,
    template: &[[f64; 2]; 5],
) -> Result<AlignedFace, AlignError> {
    let transform = solve_similarity(&det.landmarks, template)?;
    let image = warp_crop(img, &transform, ALIGNED_SIZE, ALIGNED_SIZE)?;
    let eyes_ordered = transform.apply(det.landmarks[0])[0] < transform.apply(det.landmarks[1])[0];
    if !eyes_ordered {
        log::warn!(
            "eye order inverted after alignment (rotation {:.1} deg); check detector landmark order",
            transform.rotation().to_degrees()
        );
    }
    Ok(AlignedFace {
        image,
        transform,
        eyes_ordered,
    })
}

/// Fallback when alignment is switched off: stretches the detection box to
/// `out_w` x `out_h` without any rotation.
pub fn crop_resize(
    img: &Image,
    bbox: &BBox,
    out_w: usize,
    out_h: usize,
) -> Result<Image, AlignError> {
    let [x1, y1, x2, y2] = *bbox;
    if !(x2 > x1 && y2 > y1) {
        return Err(AlignError::DegenerateSource);
    }
    let (sx, sy) = ((x2 - x1) / out_w as f64, (y2 - y1) / out_h as f64);
    let mut out = Image::filled(out_w, out_h, [0; 3])?;
    for v in 0..out_h {
        for u in 0..out_w {
            let x = x1 + (u as f64 + 0.5) * sx - 0.5;
            let y = y1 + (v as f64 + 0.5) * sy - 0.5;
            out.put(u, v, to_rgb8(bilinear_sample(img, x, y)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GENERIC: [[f64; 2]; 5] = [
        [3.0, 4.0],
        [17.0, 2.5],
        [9.0, 11.0],
        [5.0, 18.0],
        [15.5, 17.0],
    ];

    fn map_all(t: &SimilarityTransform, pts: &[[f64; 2]; 5]) -> [[f64; 2]; 5] {
        pts.map(|p| t.apply(p))
    }

    #[test]
    fn identity_recovered() {
        let t = solve_similarity(&GENERIC, &GENERIC).unwrap();
        assert!((t.a - 1.0).abs() < 1e-12 && t.b.abs() < 1e-12);
        assert!(t.tx.abs() < 1e-12 && t.ty.abs() < 1e-12);
    }

    #[test]
    fn quarter_turn() {
        let dst = GENERIC.map(|[x, y]| [-y, x]);
        let t = solve_similarity(&GENERIC, &dst).unwrap();
        assert!(t.a.abs() < 1e-12 && (t.b - 1.0).abs() < 1e-12);
        assert!(t.tx.abs() < 1e-12 && t.ty.abs() < 1e-12);
    }

    #[test]
    fn synthetic_transform_recovered() {
        let truth = SimilarityTransform {
            a: 1.3,
            b: 0.2,
            tx: 5.0,
            ty: -3.0,
        };
        let t = solve_similarity(&GENERIC, &map_all(&truth, &GENERIC)).unwrap();
        for (got, want) in [(t.a, 1.3), (t.b, 0.2), (t.tx, 5.0), (t.ty, -3.0)] {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn coincident_points_rejected() {
        let same = [[4.0, 4.0]; 5];
        assert_eq!(
            solve_similarity(&same, &GENERIC),
            Err(AlignError::DegenerateSource)
        );
        assert!(matches!(
            solve_similarity(&GENERIC[..1], &GENERIC[..1]),
            Err(AlignError::PointCount { .. })
        ));
    }

    #[test]
    fn inverse_round_trip() {
        let t = SimilarityTransform {
            a: 0.7,
            b: -0.4,
            tx: 12.0,
            ty: 3.0,
        };
        let inv = t.inverse().unwrap();
        let p = inv.apply(t.apply([5.0, -2.0]));
        assert!((p[0] - 5.0).abs() < 1e-12 && (p[1] + 2.0).abs() < 1e-12);
        let zero = SimilarityTransform {
            a: 0.0,
            b: 0.0,
            tx: 1.0,
            ty: 1.0,
        };
        assert_eq!(zero.inverse(), Err(AlignError::NonInvertible));
    }

    fn gradient(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, [0; 3]).unwrap();
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, [(x * 2) as u8, (y * 2) as u8, 7]);
            }
        }
        img
    }

    #[test]
    fn identity_warp_is_copy() {
        let img = gradient(120, 120);
        let out = warp_crop(&img, &SimilarityTransform::IDENTITY, 112, 112).unwrap();
        for y in 0..112 {
            for x in 0..112 {
                assert_eq!(out.get(x, y), img.get(x, y));
            }
        }
    }

    #[test]
    fn translation_shifts_crop() {
        let img = gradient(100, 40);
        let t = SimilarityTransform {
            tx: 10.0,
            ..SimilarityTransform::IDENTITY
        };
        let out = warp_crop(&img, &t, 50, 30).unwrap();
        for y in 0..30 {
            for x in 10..50 {
                assert_eq!(out.get(x, y), img.get(x - 10, y));
            }
            // left band clamps to the source edge column
            assert_eq!(out.get(3, y), img.get(0, y));
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(30, 20, [9, 99, 199]).unwrap();
        let t = SimilarityTransform {
            a: 0.3,
            b: 1.1,
            tx: -40.0,
            ty: 7.0,
        };
        let out = warp_crop(&img, &t, 16, 16).unwrap();
        assert!(out.pixels().chunks(3).all(|p| p == [9, 99, 199]));
    }

    fn det_with(landmarks: [[f64; 2]; 5]) -> Detection {
        Detection {
            bbox: [0.0, 0.0, 112.0, 112.0],
            score: 1.0,
            landmarks,
        }
    }

    #[test]
    fn template_landmarks_give_identity_crop() {
        let img = gradient(120, 120);
        let aligned = align_face(&img, &det_with(DEFAULT_TEMPLATE), &DEFAULT_TEMPLATE).unwrap();
        assert_eq!(aligned.image.width(), ALIGNED_SIZE);
        assert_eq!(aligned.image.height(), ALIGNED_SIZE);
        assert!(aligned.eyes_ordered);
        let direct = warp_crop(&img, &SimilarityTransform::IDENTITY, 112, 112).unwrap();
        assert_eq!(aligned.image, direct);
    }

    #[test]
    fn doubled_template_halves_scale() {
        let img = gradient(300, 300);
        let lm = DEFAULT_TEMPLATE.map(|[x, y]| [2.0 * x + 17.0, 2.0 * y - 4.0]);
        let aligned = align_face(&img, &det_with(lm), &DEFAULT_TEMPLATE).unwrap();
        assert!((aligned.transform.scale() - 0.5).abs() < 1e-9);
        assert!(aligned.transform.b.abs() < 1e-9);
    }

    #[test]
    fn swapped_eyes_are_flagged() {
        let img = gradient(120, 120);
        let mut lm = DEFAULT_TEMPLATE;
        lm.swap(0, 1);
        lm.swap(3, 4);
        let aligned = align_face(&img, &det_with(lm), &DEFAULT_TEMPLATE).unwrap();
        assert!(!aligned.eyes_ordered);
        // a left-right mirror is not a similarity; the best fit keeps zero
        // rotation and shrinks to a fraction of unit scale
        assert!(aligned.transform.b.abs() < 1e-9, "{:?}", aligned.transform);
        assert!(aligned.transform.scale() < 0.3);
    }

    #[test]
    fn crop_resize_whole_image_is_copy() {
        let mut img = Image::filled(4, 3, [0; 3]).unwrap();
        img.put(2, 1, [9, 8, 7]);
        let out = crop_resize(&img, &[0.0, 0.0, 4.0, 3.0], 4, 3).unwrap();
        assert_eq!(out, img);
        assert_eq!(
            crop_resize(&img, &[1.0, 1.0, 1.0, 2.0], 4, 4),
            Err(AlignError::DegenerateSource)
        );
    }
}
