//! Numeric arrays, RGB images and the deterministic preprocessing that feeds
//! both networks (letterboxing for the detector, `[0, 1]` NCHW tensors for
//! everything).

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but buffer has {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero dimension")]
    ZeroDimension(Vec<usize>),
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error("quantization scale must be positive and finite, got {0}")]
    BadScale(f32),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("expected {expected} tensor, found {found}")]
    WrongDType { expected: DType, found: DType },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::I8 => f.write_str("i8"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    /// Symmetric quantization: real value = `scale * q`.
    I8 {
        data: Vec<i8>,
        scale: f32,
    },
}

/// Row-major n-dimensional array. 4-D tensors are laid out NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_shape(shape: &[usize], len: usize) -> Result<(), TensorError> {
    if shape.contains(&0) {
        return Err(TensorError::ZeroDimension(shape.to_vec()));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(TensorError::ShapeMismatch {
            shape: shape.to_vec(),
            expected,
            actual: len,
        });
    }
    Ok(())
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        check_shape(&shape, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Self {
            shape,
            data: TensorData::F32(data),
        })
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>, scale: f32) -> Result<Self, TensorError> {
        check_shape(&shape, data.len())?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(TensorError::BadScale(scale));
        }
        Ok(Self {
            shape,
            data: TensorData::I8 { data, scale },
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::from_f32(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::I8 { .. } => DType::I8,
        }
    }

    pub fn qscale(&self) -> Option<f32> {
        match self.data {
            TensorData::F32(_) => None,
            TensorData::I8 { scale, .. } => Some(scale),
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_f32(&self) -> Result<&[f32], TensorError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::I8 { .. } => Err(TensorError::WrongDType {
                expected: DType::F32,
                found: DType::I8,
            }),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8], TensorError> {
        match &self.data {
            TensorData::I8 { data, .. } => Ok(data),
            TensorData::F32(_) => Err(TensorError::WrongDType {
                expected: DType::I8,
                found: DType::F32,
            }),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>, TensorError> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::I8 { .. } => Err(TensorError::WrongDType {
                expected: DType::F32,
                found: DType::I8,
            }),
        }
    }

    /// Real-valued view of the elements; i8 data is dequantized.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(v) => v.clone(),
            TensorData::I8 { data, scale } => data.iter().map(|&q| q as f32 * scale).collect(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        check_shape(&shape, self.len())?;
        Ok(Self {
            shape,
            data: self.data,
        })
    }
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, TensorError> {
        if width == 0 || height == 0 {
            return Err(TensorError::InvalidImage(format!(
                "zero-sized image {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(TensorError::InvalidImage(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, TensorError> {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Mapping from source-image pixels into the letterboxed canvas:
/// `p_canvas = p_source * scale + pad`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LetterboxMeta {
    pub scale: f64,
    pub pad_left: f64,
    pub pad_top: f64,
    pub src_width: usize,
    pub src_height: usize,
}

impl LetterboxMeta {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            scale: 1.0,
            pad_left: 0.0,
            pad_top: 0.0,
            src_width: width,
            src_height: height,
        }
    }

    /// Source point to canvas point.
    pub fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x * self.scale + self.pad_left,
            y * self.scale + self.pad_top,
        )
    }
}

pub const DEFAULT_LETTERBOX_FILL: u8 = 114;

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// Aspect-preserving bilinear resize into a `target_w x target_h` canvas
/// filled with `fill`. Odd padding puts the extra pixel on the right/bottom.
pub fn letterbox(
    img: &Image,
    target_w: usize,
    target_h: usize,
    fill: u8,
) -> Result<(Image, LetterboxMeta), TensorError> {
    if target_w == 0 || target_h == 0 {
        return Err(TensorError::InvalidImage(format!(
            "zero-sized letterbox target {target_w}x{target_h}"
        )));
    }
    let (w, h) = (img.width, img.height);
    let scale = (target_w as f64 / w as f64).min(target_h as f64 / h as f64);
    let new_w = round_half_up(w as f64 * scale).clamp(1, target_w);
    let new_h = round_half_up(h as f64 * scale).clamp(1, target_h);
    let pad_left = (target_w - new_w) / 2;
    let pad_top = (target_h - new_h) / 2;

    let mut out = Image::filled(target_w, target_h, [fill; 3])?;
    let identity = new_w == w && new_h == h;
    for v in 0..new_h {
        let sy = (v as f64 + 0.5) / scale - 0.5;
        for u in 0..new_w {
            let px = if identity {
                img.get(u, v)
            } else {
                let sx = (u as f64 + 0.5) / scale - 0.5;
                to_rgb8(bilinear_sample(img, sx, sy))
            };
            out.put(u + pad_left, v + pad_top, px);
        }
    }
    let meta = LetterboxMeta {
        scale,
        pad_left: pad_left as f64,
        pad_top: pad_top as f64,
        src_width: w,
        src_height: h,
    };
    Ok((out, meta))
}

/// `(1, 3, H, W)` f32 tensor with every channel value divided by 255.
pub fn normalize_to_tensor(img: &Image) -> Tensor {
    let plane = img.width * img.height;
    let mut data = vec![0f32; plane * 3];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        data[i] = px[0] as f32 / 255.0;
        data[plane + i] = px[1] as f32 / 255.0;
        data[2 * plane + i] = px[2] as f32 / 255.0;
    }
    Tensor {
        shape: vec![1, 3, img.height, img.width],
        data: TensorData::F32(data),
    }
}

/// Bilinear interpolation at a real-valued pixel coordinate. Coordinates
/// outside the image clamp to the nearest edge.
pub fn bilinear_sample(img: &Image, x: f64, y: f64) -> [f64; 3] {
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, max_x) };
    let y = if y.is_nan() { 0.0 } else { y.clamp(0.0, max_y) };
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;

    let p00 = img.get(x0, y0);
    let p10 = img.get(x1, y0);
    let p01 = img.get(x0, y1);
    let p11 = img.get(x1, y1);
    let mut out = [0f64; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = top * (1.0 - fy) + bottom * fy;
    }
    out
}

#[inline]
pub(crate) fn to_rgb8(v: [f64; 3]) -> [u8; 3] {
    [
        v[0].round().clamp(0.0, 255.0) as u8,
        v[1].round().clamp(0.0, 255.0) as u8,
        v[2].round().clamp(0.0, 255.0) as u8,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, [0; 3]).unwrap();
        for y in 0..h {
            for x in 0..w {
                img.put(
                    x,
                    y,
                    [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8],
                );
            }
        }
        img
    }

    #[test]
    fn tensor_invariants() {
        assert!(matches!(
            Tensor::from_f32(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Tensor::from_f32(vec![1], vec![f32::NAN]),
            Err(TensorError::NonFinite(0))
        ));
        assert!(matches!(
            Tensor::from_i8(vec![1], vec![1], 0.0),
            Err(TensorError::BadScale(_))
        ));
        let q = Tensor::from_i8(vec![2], vec![2, -4], 0.5).unwrap();
        assert_eq!(q.qscale(), Some(0.5));
        assert_eq!(q.to_f32_vec(), vec![1.0, -2.0]);
        assert_eq!(Tensor::zeros(vec![3]).unwrap().qscale(), None);
    }

    #[test]
    fn letterbox_identity() {
        let img = gradient(640, 640);
        let (out, meta) = letterbox(&img, 640, 640, 114).unwrap();
        assert_eq!(out, img);
        assert_eq!(meta.scale, 1.0);
        assert_eq!((meta.pad_left, meta.pad_top), (0.0, 0.0));
    }

    #[test]
    fn letterbox_pads_short_side() {
        let img = gradient(640, 480);
        let (out, meta) = letterbox(&img, 640, 640, 114).unwrap();
        assert_eq!(meta.scale, 1.0);
        assert_eq!((meta.pad_left, meta.pad_top), (0.0, 80.0));
        assert_eq!(out.get(0, 0), [114; 3]);
        assert_eq!(out.get(5, 80 + 7), img.get(5, 7));
        assert_eq!(out.get(0, 639), [114; 3]);
    }

    #[test]
    fn letterbox_downscales() {
        let img = Image::filled(1280, 720, [200, 10, 30]).unwrap();
        let (out, meta) = letterbox(&img, 640, 640, 114).unwrap();
        assert_eq!(meta.scale, 0.5);
        assert_eq!((meta.pad_left, meta.pad_top), (0.0, 140.0));
        assert_eq!(out.get(320, 139), [114; 3]);
        assert_eq!(out.get(320, 140), [200, 10, 30]);
        assert_eq!(out.get(320, 140 + 359), [200, 10, 30]);
        assert_eq!(out.get(320, 140 + 360), [114; 3]);
    }

    #[test]
    fn letterbox_odd_padding_goes_right() {
        let img = Image::filled(10, 7, [1, 2, 3]).unwrap();
        let (_, meta) = letterbox(&img, 10, 10, 0).unwrap();
        // 3 spare rows: 1 on top, 2 at the bottom
        assert_eq!(meta.pad_top, 1.0);
    }

    #[test]
    fn letterbox_rejects_zero_target() {
        let img = Image::filled(4, 4, [0; 3]).unwrap();
        assert!(letterbox(&img, 0, 4, 0).is_err());
        assert!(Image::new(0, 4, vec![]).is_err());
    }

    #[test]
    fn normalize_values() {
        let zero = Image::filled(3, 2, [0; 3]).unwrap();
        let t = normalize_to_tensor(&zero);
        assert_eq!(t.shape(), &[1, 3, 2, 3]);
        assert!(t.as_f32().unwrap().iter().all(|&v| v == 0.0));

        let white = Image::filled(1, 1, [255; 3]).unwrap();
        assert_eq!(normalize_to_tensor(&white).as_f32().unwrap(), &[1.0; 3]);

        let img = Image::new(1, 1, vec![128, 0, 255]).unwrap();
        let t = normalize_to_tensor(&img);
        let v = t.as_f32().unwrap();
        assert!((v[0] - 0.501_960_784).abs() < 1e-7);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 1.0);
    }

    #[test]
    fn bilinear_cases() {
        let img = Image::new(2, 1, vec![0, 0, 0, 100, 100, 100]).unwrap();
        assert_eq!(bilinear_sample(&img, 1.0, 0.0), [100.0; 3]);
        assert_eq!(bilinear_sample(&img, 0.5, 0.0), [50.0; 3]);
        assert_eq!(bilinear_sample(&img, -3.0, 9.0), [0.0; 3]);
        assert_eq!(bilinear_sample(&img, 7.0, -2.0), [100.0; 3]);
    }

    proptest! {
        #[test]
        fn normalize_in_unit_interval(px in proptest::collection::vec(any::<u8>(), 12)) {
            let img = Image::new(2, 2, px).unwrap();
            let t = normalize_to_tensor(&img);
            prop_assert!(t.as_f32().unwrap().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn bilinear_exact_on_lattice(x in 0usize..7, y in 0usize..5) {
            let img = gradient(7, 5);
            let s = bilinear_sample(&img, x as f64, y as f64);
            let p = img.get(x, y);
            prop_assert_eq!(s, [p[0] as f64, p[1] as f64, p[2] as f64]);
        }

        #[test]
        fn bilinear_continuous(x in 0.0f64..6.0, y in 0.0f64..4.0) {
            let img = gradient(7, 5);
            let a = bilinear_sample(&img, x, y);
            let b = bilinear_sample(&img, x + 1e-7, y + 1e-7);
            for c in 0..3 {
                prop_assert!((a[c] - b[c]).abs() < 1e-3);
            }
        }
    }
}
