//! Multi-rate (decoded, original) patch pairs.

use std::path::Path;

use super::{TrainConfig, TrainError};
use crate::codec::{decode_image, encode_image};
use crate::eval::load_dir;
use crate::image_io::{extract_patches, GrayImage};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePair {
    pub y_patch: GrayImage,
    pub x_patch: GrayImage,
    pub tau: u8,
}

/// Compresses each full image at every configured `tau`, then cuts aligned
/// patches from the original and the decoded image.
pub fn build_dataset(dir: &Path, cfg: &TrainConfig) -> Result<Vec<SamplePair>, TrainError> {
    cfg.validate()?;
    let images = load_dir(dir)?;
    let mut pairs = Vec::new();
    for (_, x) in &images {
        pairs.extend(pairs_for_image(x, cfg)?);
    }
    Ok(pairs)
}

pub fn pairs_for_image(x: &GrayImage, cfg: &TrainConfig) -> Result<Vec<SamplePair>, TrainError> {
    let x_patches = extract_patches(x, cfg.patch, cfg.stride);
    let mut pairs = Vec::with_capacity(x_patches.len() * cfg.taus.len());
    for &tau in &cfg.taus {
        let encoded = encode_image(x, tau)?;
        let y = decode_image(&encoded.stream)?;
        let y_patches = extract_patches(&y, cfg.patch, cfg.stride);
        for (y_patch, x_patch) in y_patches.into_iter().zip(&x_patches) {
            pairs.push(SamplePair {
                y_patch,
                x_patch: x_patch.clone(),
                tau,
            });
        }
    }
    Ok(pairs)
}
