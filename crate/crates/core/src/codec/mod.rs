//! l-infinity constrained predictive codec.
//!
//! Each pixel is predicted from its already reconstructed neighbours with the
//! median edge detector, the residual is quantized with step `2 * tau + 1`
//! and the index is Golomb-Rice coded under one of eight activity contexts.
//! Every reconstructed pixel lies within `tau` of the original.

pub mod bits;
pub mod entropy;

use thiserror::Error;

use crate::image_io::GrayImage;
use bits::{BitReader, BitWriter};
use entropy::{context_id, CoderState};

pub use entropy::{
    choose_k, golomb_rice_decode, golomb_rice_encode, map_signed, unmap_signed,
};

pub const MAGIC: [u8; 4] = *b"LNLC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
pub const MAX_TAU: u8 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported stream version {0}")]
    BadVersion(u8),
    #[error("stream header truncated ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("tau {0} outside 0..=8")]
    InvalidTau(u8),
    #[error("invalid stream dimensions {0}x{1}")]
    InvalidDimensions(u32, u32),
    #[error("corrupt payload: {0}")]
    CorruptPayload(&'static str),
    #[error("{0} bytes of trailing data after payload")]
    TrailingData(usize),
}

/// Reconstructed neighbours of the current pixel after border substitution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CausalContext {
    pub n: u8,
    pub w: u8,
    pub nw: u8,
    pub ne: u8,
}

impl CausalContext {
    /// Neighbourhood of `(row, col)` in a plane whose pixels before it in
    /// raster order are final.
    ///
    /// First pixel: everything 128. First row: all neighbours are `w`.
    /// First column: `w` and `nw` are `n`. Right edge: `ne` is `n`.
    pub fn gather(plane: &[u8], width: usize, row: usize, col: usize) -> Self {
        let at = |r: usize, c: usize| plane[r * width + c];
        match (row, col) {
            (0, 0) => Self {
                n: 128,
                w: 128,
                nw: 128,
                ne: 128,
            },
            (0, _) => {
                let w = at(0, col - 1);
                Self { n: w, w, nw: w, ne: w }
            }
            _ => {
                let n = at(row - 1, col);
                let (w, nw) = if col == 0 {
                    (n, n)
                } else {
                    (at(row, col - 1), at(row - 1, col - 1))
                };
                let ne = if col + 1 < width { at(row - 1, col + 1) } else { n };
                Self { n, w, nw, ne }
            }
        }
    }

    pub fn context_id(&self) -> usize {
        context_id(self.n, self.w, self.ne)
    }
}

/// Median edge detector.
pub fn predict_med(ctx: &CausalContext) -> u8 {
    let (n, w, nw) = (ctx.n, ctx.w, ctx.nw);
    let (lo, hi) = (n.min(w), n.max(w));
    if nw >= hi {
        lo
    } else if nw <= lo {
        hi
    } else {
        (i16::from(n) + i16::from(w) - i16::from(nw)).clamp(0, 255) as u8
    }
}

/// A prediction residual with its quantization index and dequantized value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualCode {
    pub e: i32,
    pub q: i32,
    pub e_hat: i32,
}

/// Uniform quantizer with step `2 * tau + 1`, symmetric around zero, so that
/// `|e - e_hat| <= tau`.
pub fn quantize_residual(e: i32, tau: u8) -> ResidualCode {
    let step = 2 * i32::from(tau) + 1;
    let q = e.signum() * ((e.abs() + i32::from(tau)) / step);
    ResidualCode {
        e,
        q,
        e_hat: q * step,
    }
}

#[inline]
pub fn dequantize(q: i32, tau: u8) -> i32 {
    q * (2 * i32::from(tau) + 1)
}

/// Compressed image: fixed header plus the entropy-coded payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeStream {
    pub width: u32,
    pub height: u32,
    pub tau: u8,
    pub payload: Vec<u8>,
}

impl CodeStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.tau);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses the header; the payload is validated only when decoding.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::TruncatedHeader(bytes.len()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CodecError::BadMagic(magic));
        }
        if bytes[4] != VERSION {
            return Err(CodecError::BadVersion(bytes[4]));
        }
        let width = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
        let height = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes"));
        let tau = bytes[13];
        if tau > MAX_TAU {
            return Err(CodecError::InvalidTau(tau));
        }
        if width == 0 || height == 0 {
            return Err(CodecError::InvalidDimensions(width, height));
        }
        Ok(Self {
            width,
            height,
            tau,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }

    /// Total size including the header.
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

/// Output of [`encode_image`]: the stream and the decoder-side image.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub stream: CodeStream,
    pub reconstruction: GrayImage,
}

pub fn encode_image(img: &GrayImage, tau: u8) -> Result<Encoded, CodecError> {
    if tau > MAX_TAU {
        return Err(CodecError::InvalidTau(tau));
    }
    let (width, height) = (img.width(), img.height());
    let dims = |v: usize| u32::try_from(v).map_err(|_| CodecError::InvalidDimensions(0, 0));
    let (w32, h32) = (dims(width)?, dims(height)?);
    let mut recon = vec![0u8; width * height];
    let mut state = CoderState::default();
    let mut writer = BitWriter::new();
    for row in 0..height {
        for col in 0..width {
            let ctx = CausalContext::gather(&recon, width, row, col);
            let pred = predict_med(&ctx);
            let x = img.get(row, col);
            let code = quantize_residual(i32::from(x) - i32::from(pred), tau);
            state.encode(&mut writer, ctx.context_id(), code.q);
            recon[row * width + col] = (i32::from(pred) + code.e_hat).clamp(0, 255) as u8;
        }
    }
    Ok(Encoded {
        stream: CodeStream {
            width: w32,
            height: h32,
            tau,
            payload: writer.finish(),
        },
        reconstruction: GrayImage::new(width, height, recon).expect("dimensions checked"),
    })
}

pub fn decode_image(stream: &CodeStream) -> Result<GrayImage, CodecError> {
    if stream.tau > MAX_TAU {
        return Err(CodecError::InvalidTau(stream.tau));
    }
    if stream.width == 0 || stream.height == 0 {
        return Err(CodecError::InvalidDimensions(stream.width, stream.height));
    }
    let (width, height) = (stream.width as usize, stream.height as usize);
    // Every pixel costs at least one bit.
    if width.saturating_mul(height) > stream.payload.len().saturating_mul(8) {
        return Err(CodecError::CorruptPayload("payload shorter than pixel count"));
    }
    let mut recon = vec![0u8; width * height];
    let mut state = CoderState::default();
    let mut reader = BitReader::new(&stream.payload);
    for row in 0..height {
        for col in 0..width {
            let ctx = CausalContext::gather(&recon, width, row, col);
            let pred = predict_med(&ctx);
            let q = state.decode(&mut reader, ctx.context_id())?;
            let value = i32::from(pred) + dequantize(q, stream.tau);
            let slack = i32::from(stream.tau);
            if !(-slack..=255 + slack).contains(&value) {
                return Err(CodecError::CorruptPayload("index outside residual range"));
            }
            recon[row * width + col] = value.clamp(0, 255) as u8;
        }
    }
    let (extra, clean) = reader.remainder();
    if extra > 0 {
        return Err(CodecError::TrailingData(extra));
    }
    if !clean {
        return Err(CodecError::CorruptPayload("nonzero padding bits"));
    }
    Ok(GrayImage::new(width, height, recon).expect("dimensions checked"))
}

pub fn decode_bytes(bytes: &[u8]) -> Result<GrayImage, CodecError> {
    decode_image(&CodeStream::from_bytes(bytes)?)
}

/// Stream size in bits (header included) per pixel.
pub fn bits_per_pixel(stream: &CodeStream, img: &GrayImage) -> f64 {
    debug_assert_eq!(
        (stream.width as usize, stream.height as usize),
        (img.width(), img.height())
    );
    8.0 * stream.byte_len() as f64 / (img.width() * img.height()) as f64
}
