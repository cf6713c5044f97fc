//! Fidelity metrics and rate-distortion sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{self, CodecError};
use crate::image_io::{self, GrayImage, ImageError};
use crate::network::{forward_refine, Model, NetworkError};

pub const CSV_HEADER: &str = "tau,bpp,psnr_conv,linf_conv,psnr_refined,linf_refined";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("no PGM images in {0}")]
    EmptyDataset(PathBuf),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("malformed CSV line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_dims(a: &GrayImage, b: &GrayImage) -> Result<(), EvalError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(EvalError::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    Ok(())
}

/// Sum of squared sample differences.
pub fn squared_error(a: &GrayImage, b: &GrayImage) -> Result<u64, EvalError> {
    check_dims(a, b)?;
    Ok(a.samples()
        .iter()
        .zip(b.samples())
        .map(|(&x, &y)| {
            let d = u64::from(x.abs_diff(y));
            d * d
        })
        .sum())
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB with peak 255; infinite for identical
/// images.
pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64, EvalError> {
    let sse = squared_error(a, b)?;
    Ok(psnr_from_mse(sse as f64 / a.samples().len() as f64))
}

/// Largest absolute sample difference.
pub fn linf_bound(a: &GrayImage, b: &GrayImage) -> Result<u8, EvalError> {
    check_dims(a, b)?;
    Ok(a.samples()
        .iter()
        .zip(b.samples())
        .map(|(x, y)| x.abs_diff(*y))
        .max()
        .unwrap_or(0))
}

/// Sorted `*.pgm` paths in a directory.
pub fn list_pgm(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(EvalError::EmptyDataset(dir.to_path_buf()));
    }
    Ok(paths)
}

/// Reads every PGM in `dir`, in filename order. Any unreadable file aborts.
pub fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, GrayImage)>, EvalError> {
    list_pgm(dir)?
        .into_iter()
        .map(|path| match image_io::read_pgm(&path) {
            Ok(img) => Ok((path, img)),
            Err(source) => Err(EvalError::Image { path, source }),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Conventional,
    Refined,
}

/// One rate-distortion measurement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub tau: u8,
    pub bpp: f64,
    pub psnr_db: f64,
    pub linf_bound: u8,
    pub decoder: DecoderKind,
}

/// A CSV row: the conventional point and, with a model, the refined one at
/// the same rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdRow {
    pub conventional: RdPoint,
    pub refined: Option<RdPoint>,
}

/// Per-image measurements before aggregation.
#[derive(Clone, Debug)]
pub struct ImageRd {
    pub path: PathBuf,
    pub tau: u8,
    pub pixels: usize,
    pub bpp: f64,
    pub sse_conv: u64,
    pub linf_conv: u8,
    pub refined: Option<(u64, u8)>,
}

/// Encodes, decodes and optionally refines one image at one rate.
pub fn measure_image(
    path: &Path,
    img: &GrayImage,
    tau: u8,
    model: Option<&Model>,
) -> Result<ImageRd, EvalError> {
    let enc = codec::encode_image(img, tau)?;
    let decoded = codec::decode_image(&enc.stream)?;
    let refined = match model {
        Some(m) => {
            let x_hat = forward_refine(m, &decoded, tau)?;
            Some((squared_error(img, &x_hat)?, linf_bound(img, &x_hat)?))
        }
        None => None,
    };
    Ok(ImageRd {
        path: path.to_path_buf(),
        tau,
        pixels: img.samples().len(),
        bpp: codec::bits_per_pixel(&enc.stream, img),
        sse_conv: squared_error(img, &decoded)?,
        linf_conv: linf_bound(img, &decoded)?,
        refined,
    })
}

/// Fixes a value to what its 4-place CSV rendering parses back to.
fn round4(v: f64) -> f64 {
    if v.is_finite() {
        format!("{v:.4}").parse().expect("formatted float")
    } else {
        v
    }
}

/// Aggregates per-image results for one rate: mean bpp, PSNR of the pooled
/// MSE, max l-infinity.
pub fn aggregate(tau: u8, results: &[ImageRd]) -> RdRow {
    let pixels: usize = results.iter().map(|r| r.pixels).sum();
    let bpp = round4(results.iter().map(|r| r.bpp).sum::<f64>() / results.len() as f64);
    let point = |sse: u64, linf: u8, decoder| RdPoint {
        tau,
        bpp,
        psnr_db: round4(psnr_from_mse(sse as f64 / pixels as f64)),
        linf_bound: linf,
        decoder,
    };
    let conventional = point(
        results.iter().map(|r| r.sse_conv).sum(),
        results.iter().map(|r| r.linf_conv).max().unwrap_or(0),
        DecoderKind::Conventional,
    );
    let refined = results
        .iter()
        .map(|r| r.refined)
        .collect::<Option<Vec<_>>>()
        .map(|v| {
            point(
                v.iter().map(|r| r.0).sum(),
                v.iter().map(|r| r.1).max().unwrap_or(0),
                DecoderKind::Refined,
            )
        });
    RdRow {
        conventional,
        refined,
    }
}

/// Runs every image at every `tau` and aggregates per rate.
pub fn rd_sweep_images(
    images: &[(PathBuf, GrayImage)],
    taus: &[u8],
    model: Option<&Model>,
) -> Result<Vec<RdRow>, EvalError> {
    taus.iter()
        .map(|&tau| {
            let results = images
                .par_iter()
                .map(|(path, img)| measure_image(path, img, tau, model))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(aggregate(tau, &results))
        })
        .collect()
}

pub fn rd_sweep(
    data_dir: &Path,
    taus: &[u8],
    model: Option<&Model>,
    csv_out: Option<&Path>,
) -> Result<Vec<RdRow>, EvalError> {
    let images = load_dir(data_dir)?;
    let rows = rd_sweep_images(&images, taus, model)?;
    if let Some(path) = csv_out {
        fs::write(path, format_rd_csv(&rows))?;
    }
    Ok(rows)
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

pub fn format_rd_csv(rows: &[RdRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        let c = &row.conventional;
        let _ = write!(
            out,
            "{},{:.4},{},{}",
            c.tau,
            c.bpp,
            fmt_db(c.psnr_db),
            c.linf_bound
        );
        match &row.refined {
            Some(r) => {
                let _ = writeln!(out, ",{},{}", fmt_db(r.psnr_db), r.linf_bound);
            }
            None => out.push_str(",,\n"),
        }
    }
    out
}

pub fn parse_rd_csv(text: &str) -> Result<Vec<RdRow>, EvalError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        _ => {
            return Err(EvalError::Csv {
                line: 1,
                reason: "missing header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let err = |reason: &str| EvalError::Csv {
                line: i + 1,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(err("expected 6 fields"));
            }
            let tau: u8 = fields[0].parse().map_err(|_| err("tau"))?;
            let bpp: f64 = fields[1].parse().map_err(|_| err("bpp"))?;
            let db = |s: &str| -> Result<f64, EvalError> {
                if s == "inf" {
                    Ok(f64::INFINITY)
                } else {
                    s.parse().map_err(|_| err("psnr"))
                }
            };
            let linf = |s: &str| -> Result<u8, EvalError> { s.parse().map_err(|_| err("linf")) };
            let conventional = RdPoint {
                tau,
                bpp,
                psnr_db: db(fields[2])?,
                linf_bound: linf(fields[3])?,
                decoder: DecoderKind::Conventional,
            };
            let refined = if fields[4].is_empty() && fields[5].is_empty() {
                None
            } else {
                Some(RdPoint {
                    tau,
                    bpp,
                    psnr_db: db(fields[4])?,
                    linf_bound: linf(fields[5])?,
                    decoder: DecoderKind::Refined,
                })
            };
            Ok(RdRow {
                conventional,
                refined,
            })
        })
        .collect()
}

/// Result of checking one image at one rate against the codec contract.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundtripRecord {
    pub path: PathBuf,
    pub tau: u8,
    pub max_error: u8,
    /// Bound held, decoder matched the encoder, and `tau == 0` was exact.
    pub pass: bool,
}

/// Encodes every image at every rate, decodes with `decoder` and checks the
/// l-infinity bound and encoder/decoder agreement.
pub fn roundtrip_check<D>(
    images: &[(PathBuf, GrayImage)],
    taus: &[u8],
    decoder: D,
) -> Result<Vec<RoundtripRecord>, EvalError>
where
    D: Fn(&[u8]) -> Result<GrayImage, CodecError> + Sync,
{
    let jobs: Vec<(&PathBuf, &GrayImage, u8)> = images
        .iter()
        .flat_map(|(p, img)| taus.iter().map(move |&t| (p, img, t)))
        .collect();
    jobs.par_iter()
        .map(|&(path, img, tau)| {
            let enc = codec::encode_image(img, tau)?;
            let record = |max_error, pass| RoundtripRecord {
                path: path.clone(),
                tau,
                max_error,
                pass,
            };
            let decoded = match decoder(&enc.stream.to_bytes()) {
                Ok(d) if d.width() == img.width() && d.height() == img.height() => d,
                _ => return Ok(record(u8::MAX, false)),
            };
            let max_error = linf_bound(img, &decoded)?;
            let pass = max_error <= tau && decoded == enc.reconstruction && (tau > 0 || decoded == *img);
            Ok(record(max_error, pass))
        })
        .collect()
}
