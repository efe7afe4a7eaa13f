//! Image file ingestion. Binary PPM (P6) and ASCII PPM (P3) are handled
//! natively; PNG goes through the `image` crate.

use std::path::Path;

use thiserror::Error;

use crate::tensor::{Image, TensorError};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("unsupported image format (expected PPM or PNG)")]
    Unsupported,
    #[error(transparent)]
    Image(#[from] TensorError),
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageIoError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ImageIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image, ImageIoError> {
    if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        decode_ppm(bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        let rgb = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Image::new(w as usize, h as usize, rgb.into_raw())?)
    } else {
        Err(ImageIoError::Unsupported)
    }
}

struct PpmTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PpmTokens<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn next_uint(&mut self) -> Result<usize, ImageIoError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageIoError::Ppm(format!("expected integer at byte {start}")))
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<Image, ImageIoError> {
    let binary = bytes.starts_with(b"P6");
    let mut tok = PpmTokens { bytes, pos: 2 };
    let width = tok.next_uint()?;
    let height = tok.next_uint()?;
    let maxval = tok.next_uint()?;
    if maxval != 255 {
        return Err(ImageIoError::Ppm(format!(
            "only maxval 255 is supported, got {maxval}"
        )));
    }
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| ImageIoError::Ppm("dimensions overflow".into()))?;
    let pixels = if binary {
        // exactly one whitespace byte separates the header from the raster
        let start = tok.pos + 1;
        let raster = bytes
            .get(start..start + n)
            .ok_or_else(|| ImageIoError::Ppm(format!("raster truncated, need {n} bytes")))?;
        raster.to_vec()
    } else {
        (0..n)
            .map(|_| {
                let v = tok.next_uint()?;
                u8::try_from(v).map_err(|_| ImageIoError::Ppm(format!("sample {v} > 255")))
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(Image::new(width, height, pixels)?)
}

/// Binary PPM (P6) encoding.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn save_ppm(img: &Image, path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, encode_ppm(img))
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    let buf = image::RgbImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.pixels().to_vec(),
    )
    .expect("Image invariant guarantees buffer length");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
