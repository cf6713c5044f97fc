//! 8-bit grayscale rasters, binary PGM I/O, patch extraction and
//! conversion to normalized tensors.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{Real, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unsupported format: magic {0:?} (only binary P5 is supported)")]
    UnsupportedFormat(String),
    #[error("malformed PGM header: {0}")]
    MalformedHeader(&'static str),
    #[error("unsupported maxval {0} (expected 255)")]
    UnsupportedMaxval(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("invalid dimensions {width}x{height} for {len} samples")]
    InvalidDimensions {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("tensor shape {0:?} is not (1, 1, H, W)")]
    TensorShape([usize; 4]),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Single-channel 8-bit image, samples in row-major order.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    samples: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GrayImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, samples: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || width.checked_mul(height) != Some(samples.len()) {
            return Err(ImageError::InvalidDimensions {
                width,
                height,
                len: samples.len(),
            });
        }
        Ok(Self {
            width,
            height,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.samples[row * self.width + col]
    }

    pub fn into_samples(self) -> Vec<u8> {
        self.samples
    }

    /// Copies the `width x height` window whose top-left corner is at
    /// `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, width: usize, height: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut samples = Vec::with_capacity(width * height);
        for row in top..top + height {
            let start = row * self.width + left;
            samples.extend_from_slice(&self.samples[start..start + width]);
        }
        Self {
            width,
            height,
            samples,
        }
    }

    /// Mirrors the last row/column (excluding the edge itself) until both
    /// dimensions are even. Returns the image unchanged if already even.
    pub fn pad_reflect_to_even(&self) -> Self {
        let width = self.width + self.width % 2;
        let height = self.height + self.height % 2;
        if width == self.width && height == self.height {
            return self.clone();
        }
        let reflect = |i: usize, n: usize| {
            if i < n {
                i
            } else {
                // single-pixel dimensions reflect onto themselves
                (2 * n).saturating_sub(i + 2)
            }
        };
        let mut samples = Vec::with_capacity(width * height);
        for row in 0..height {
            let r = reflect(row, self.height);
            for col in 0..width {
                samples.push(self.get(r, reflect(col, self.width)));
            }
        }
        Self {
            width,
            height,
            samples,
        }
    }
}

fn parse_header(bytes: &[u8]) -> Result<(usize, usize, u32, usize), ImageError> {
    if bytes.len() < 2 {
        return Err(ImageError::MalformedHeader("file too short"));
    }
    if &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..2]).into_owned();
        return Err(ImageError::UnsupportedFormat(magic));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // Whitespace and comments between tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n' && b != b'\r') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(ImageError::MalformedHeader("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::MalformedHeader("expected a decimal field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(ImageError::MalformedHeader("field out of range"))?;
    }
    // Exactly one whitespace byte separates maxval from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ImageError::MalformedHeader("missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedHeader("zero dimension"));
    }
    Ok((width as usize, height as usize, maxval, pos))
}

/// Parses a binary PGM (P5, maxval 255) from memory.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let (width, height, maxval, offset) = parse_header(bytes)?;
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval(maxval));
    }
    let expected = width
        .checked_mul(height)
        .ok_or(ImageError::MalformedHeader("dimensions overflow"))?;
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(ImageError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    GrayImage::new(width, height, payload[..expected].to_vec())
}

/// Serializes with the canonical header `P5\n<w> <h>\n255\n`.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.samples.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&img.samples);
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage, ImageError> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

/// All `size x size` windows at origins `(r * stride, c * stride)` that fit
/// inside the image, in row-major order of origin.
pub fn extract_patches(img: &GrayImage, size: usize, stride: usize) -> Vec<GrayImage> {
    assert!(stride >= 1, "stride must be positive");
    if size == 0 || size > img.width || size > img.height {
        return Vec::new();
    }
    let mut patches = Vec::new();
    for top in (0..=img.height - size).step_by(stride) {
        for left in (0..=img.width - size).step_by(stride) {
            patches.push(img.crop(top, left, size, size));
        }
    }
    patches
}

/// `(1, 1, H, W)` tensor with values `sample / 255`.
pub fn to_normalized<T: Real>(img: &GrayImage) -> Tensor<T> {
    let scale = T::from_f64(255.0);
    let data = img
        .samples
        .iter()
        .map(|&s| T::from_f64(f64::from(s)) / scale)
        .collect();
    Tensor::from_vec([1, 1, img.height, img.width], data).expect("shape matches sample count")
}

/// Inverse of [`to_normalized`]: clamps to `[0, 1]`, scales by 255 and rounds
/// half away from zero.
pub fn from_normalized<T: Real>(t: &Tensor<T>) -> Result<GrayImage, ImageError> {
    let [n, c, h, w] = t.shape();
    if n != 1 || c != 1 || h == 0 || w == 0 {
        return Err(ImageError::TensorShape(t.shape()));
    }
    let samples = t
        .data()
        .iter()
        .map(|&v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    GrayImage::new(w, h, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_strategy() -> impl Strategy<Value = GrayImage> {
        (1usize..24, 1usize..24).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), w * h)
                .prop_map(move |s| GrayImage::new(w, h, s).unwrap())
        })
    }

    #[test]
    fn decodes_small_p5() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 7]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img, GrayImage::new(2, 2, vec![0, 128, 255, 7]).unwrap());
    }

    #[test]
    fn header_comments_and_spacing() {
        let mut bytes = b"P5 # made by hand\n3\t1 # dims\n255\r".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_pgm(&bytes).unwrap().samples(), &[1, 2, 3]);
    }

    #[test]
    fn parse_errors_are_distinct() {
        assert!(matches!(
            decode_pgm(b"P6\n1 1\n255\n\0\0\0"),
            Err(ImageError::UnsupportedFormat(m)) if m == "P6"
        ));
        assert!(matches!(
            decode_pgm(b"P5\n1 x\n255\n\0"),
            Err(ImageError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode_pgm(b"P5\n1 1\n65535\n\0\0"),
            Err(ImageError::UnsupportedMaxval(65535))
        ));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\0\0\0"),
            Err(ImageError::TruncatedPayload {
                expected: 4,
                found: 3
            })
        ));
        assert!(matches!(decode_pgm(b"P"), Err(ImageError::MalformedHeader(_))));
    }

    #[test]
    fn canonical_encoding() {
        let one = encode_pgm(&GrayImage::new(1, 1, vec![0]).unwrap());
        // "P5\n1 1\n255\n" is 11 header bytes.
        assert_eq!(one.len(), 12);
        assert_eq!(*one.last().unwrap(), 0);
        let two = encode_pgm(&GrayImage::new(2, 1, vec![255, 255]).unwrap());
        assert_eq!(&two[two.len() - 2..], &[0xFF, 0xFF]);
        assert!(two.starts_with(b"P5\n2 1\n255\n"));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = GrayImage::new(3, 2, vec![9, 8, 7, 6, 5, 4]).unwrap();
        write_pgm(&img, &path).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
        assert!(matches!(
            read_pgm(dir.path().join("missing.pgm")),
            Err(ImageError::Io(_))
        ));
    }

    #[test]
    fn patch_counts() {
        let img = |n| GrayImage::filled(n, n, 0).unwrap();
        assert_eq!(extract_patches(&img(128), 128, 32).len(), 1);
        assert_eq!(extract_patches(&img(127), 128, 32).len(), 0);
        let patches = extract_patches(&img(160), 128, 32);
        assert_eq!(patches.len(), 4);
        assert!(patches.iter().all(|p| p.width() == 128 && p.height() == 128));
    }

    #[test]
    fn patch_origins_are_row_major() {
        let samples: Vec<u8> = (0..16).collect();
        let img = GrayImage::new(4, 4, samples).unwrap();
        let patches = extract_patches(&img, 2, 2);
        let corners: Vec<u8> = patches.iter().map(|p| p.get(0, 0)).collect();
        assert_eq!(corners, vec![0, 2, 8, 10]);
    }

    #[test]
    fn normalization_values() {
        let img = GrayImage::new(3, 1, vec![255, 0, 51]).unwrap();
        let t = to_normalized::<f32>(&img);
        assert_eq!(t.shape(), [1, 1, 1, 3]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[2] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn denormalization_rounds_and_clamps() {
        let t = Tensor::<f32>::from_vec([1, 1, 1, 4], vec![0.5, -0.1, 1.7, 0.999]).unwrap();
        assert_eq!(from_normalized(&t).unwrap().samples(), &[128, 0, 255, 255]);
        let bad = Tensor::<f32>::zeros([1, 2, 1, 1]);
        assert!(matches!(from_normalized(&bad), Err(ImageError::TensorShape(_))));
    }

    #[test]
    fn reflect_padding() {
        let img = GrayImage::new(3, 1, vec![1, 2, 3]).unwrap();
        let padded = img.pad_reflect_to_even();
        assert_eq!((padded.width(), padded.height()), (4, 2));
        assert_eq!(padded.samples(), &[1, 2, 3, 2, 1, 2, 3, 2]);
        let single = GrayImage::new(1, 1, vec![5]).unwrap().pad_reflect_to_even();
        assert_eq!(single.samples(), &[5, 5, 5, 5]);
    }

    proptest! {
        #[test]
        fn pgm_roundtrip(img in image_strategy()) {
            let bytes = encode_pgm(&img);
            prop_assert_eq!(decode_pgm(&bytes).unwrap(), img.clone());
            prop_assert_eq!(encode_pgm(&decode_pgm(&bytes).unwrap()), bytes);
        }

        #[test]
        fn normalization_roundtrip(img in image_strategy()) {
            prop_assert_eq!(from_normalized(&to_normalized::<f32>(&img)).unwrap(), img);
        }

        #[test]
        fn patch_count_formula(w in 1usize..40, h in 1usize..40, size in 1usize..20, stride in 1usize..8) {
            let img = GrayImage::filled(w, h, 3).unwrap();
            let n = extract_patches(&img, size, stride).len();
            let expected = if size <= w && size <= h {
                ((h - size) / stride + 1) * ((w - size) / stride + 1)
            } else {
                0
            };
            prop_assert_eq!(n, expected);
        }
    }
}
