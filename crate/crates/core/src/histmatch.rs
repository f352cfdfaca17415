//! Per-channel histogram matching of 8-bit RGB images.
//!
//! CDFs are pooled over a set of images (optionally restricted to valid
//! pixels), and each intensity `i` is mapped to the smallest `j` with
//! `target[j] >= source[i]`.

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HistMatchError {
    #[error("no pixels to build a histogram from")]
    EmptyPool,
    #[error("mask {index} has {got} entries, image has {expected} pixels")]
    MaskSize { index: usize, expected: usize, got: usize },
    #[error("invalid cdf: {0}")]
    InvalidCdf(String),
}

/// Cumulative distribution of each RGB channel over 256 intensity bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCdf {
    channels: [[f64; 256]; 3],
}

impl ChannelCdf {
    pub fn from_channels(channels: [[f64; 256]; 3]) -> Result<Self, HistMatchError> {
        for (c, ch) in channels.iter().enumerate() {
            if ch.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(HistMatchError::InvalidCdf(format!("channel {c} has values outside [0, 1]")));
            }
            if ch.windows(2).any(|w| w[1] < w[0]) {
                return Err(HistMatchError::InvalidCdf(format!("channel {c} is not monotone")));
            }
            if ch[255] != 1.0 {
                return Err(HistMatchError::InvalidCdf(format!("channel {c} ends at {} instead of 1", ch[255])));
            }
        }
        Ok(Self { channels })
    }

    /// Builds a CDF from raw per-channel counts.
    pub fn from_counts(counts: &[[u64; 256]; 3]) -> Result<Self, HistMatchError> {
        let total: u64 = counts[0].iter().sum();
        if total == 0 {
            return Err(HistMatchError::EmptyPool);
        }
        let mut channels = [[0.0; 256]; 3];
        for (out, cnt) in channels.iter_mut().zip(counts) {
            let mut acc = 0u64;
            for (o, &n) in out.iter_mut().zip(cnt) {
                acc += n;
                *o = acc as f64 / total as f64;
            }
        }
        Ok(Self { channels })
    }

    pub fn channel(&self, c: usize) -> &[f64; 256] {
        &self.channels[c]
    }

    /// Per-channel intensity lookup tables mapping `self` onto `target`.
    pub fn mapping_to(&self, target: &ChannelCdf) -> [[u8; 256]; 3] {
        let mut lut = [[0u8; 256]; 3];
        for ((out, src), dst) in lut.iter_mut().zip(&self.channels).zip(&target.channels) {
            let mut j = 0usize;
            for (o, &s) in out.iter_mut().zip(src) {
                // src is monotone, so j never moves backwards
                while j < 255 && dst[j] < s {
                    j += 1;
                }
                *o = j as u8;
            }
        }
        lut
    }

    /// Largest absolute CDF difference per channel.
    pub fn ks_distance(&self, other: &ChannelCdf) -> [f64; 3] {
        let mut d = [0.0; 3];
        for (c, out) in d.iter_mut().enumerate() {
            *out = self.channels[c]
                .iter()
                .zip(&other.channels[c])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
        }
        d
    }
}

impl Serialize for ChannelCdf {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let flat: Vec<f64> = self.channels.iter().flatten().copied().collect();
        flat.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChannelCdf {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let flat = Vec::<f64>::deserialize(d)?;
        if flat.len() != 768 {
            return Err(serde::de::Error::custom(format!("expected 768 values, got {}", flat.len())));
        }
        let mut channels = [[0.0; 256]; 3];
        for (c, ch) in channels.iter_mut().enumerate() {
            ch.copy_from_slice(&flat[c * 256..(c + 1) * 256]);
        }
        ChannelCdf::from_channels(channels).map_err(serde::de::Error::custom)
    }
}

fn check_mask(index: usize, image: &RgbImage, mask: &[u8]) -> Result<(), HistMatchError> {
    let expected = image.width() as usize * image.height() as usize;
    if mask.len() != expected {
        return Err(HistMatchError::MaskSize { index, expected, got: mask.len() });
    }
    Ok(())
}

/// Pooled CDF over all pixels (or all pixels whose mask entry is non-zero).
pub fn compute_cdf(images: &[&RgbImage], masks: Option<&[&[u8]]>) -> Result<ChannelCdf, HistMatchError> {
    let mut counts = [[0u64; 256]; 3];
    for (i, img) in images.iter().enumerate() {
        let mask = masks.and_then(|m| m.get(i).copied());
        if let Some(m) = mask {
            check_mask(i, img, m)?;
        }
        for (k, px) in img.pixels().enumerate() {
            if mask.is_some_and(|m| m[k] == 0) {
                continue;
            }
            for c in 0..3 {
                counts[c][px.0[c] as usize] += 1;
            }
        }
    }
    ChannelCdf::from_counts(&counts)
}

/// Remaps `image` from `source` onto `target`; masked-out pixels pass
/// through unchanged.
pub fn match_histogram(image: &RgbImage, source: &ChannelCdf, target: &ChannelCdf, mask: Option<&[u8]>) -> RgbImage {
    let lut = source.mapping_to(target);
    apply_lut(image, &lut, mask)
}

pub fn apply_lut(image: &RgbImage, lut: &[[u8; 256]; 3], mask: Option<&[u8]>) -> RgbImage {
    let mut out = image.clone();
    for (k, px) in out.pixels_mut().enumerate() {
        if mask.is_some_and(|m| m.get(k) == Some(&0)) {
            continue;
        }
        for c in 0..3 {
            px.0[c] = lut[c][px.0[c] as usize];
        }
    }
    out
}

/// Matches every image in a batch. With `per_image`, each image uses its
/// own CDF as the source; otherwise one pooled source CDF is used.
pub fn match_batch(
    images: &[&RgbImage],
    masks: Option<&[&[u8]]>,
    target: &ChannelCdf,
    per_image: bool,
) -> Result<Vec<RgbImage>, HistMatchError> {
    let pooled = if per_image { None } else { Some(compute_cdf(images, masks)?) };
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let mask_slot = masks.and_then(|m| m.get(i..=i));
            let mask = mask_slot.map(|m| m[0]);
            let source = match &pooled {
                Some(cdf) => cdf.clone(),
                None => compute_cdf(&[img], mask_slot)?,
            };
            Ok(match_histogram(img, &source, target, mask))
        })
        .collect()
}
