//! Resizing, input scaling and dataset splitting.

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{AnnotatedSample, LabelMask, RasterImage, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    /// Preserve aspect ratio and pad instead of stretching.
    pub letterbox: bool,
    pub split_ratios: (f64, f64, f64),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { target_size: 1024, letterbox: false, split_ratios: (0.8, 0.1, 0.1) }
    }
}

/// Letterbox padding colour for images (glass).
const PAD_RGB: [u8; 3] = [255, 255, 255];

/// Resizes an image/mask pair to `target x target`: bilinear for the image,
/// nearest-neighbour for the mask.
pub fn resize_pair(
    image: &RasterImage,
    mask: &LabelMask,
    target: usize,
    letterbox: bool,
) -> Result<(RasterImage, LabelMask)> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(invalid!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        ));
    }
    if target == 0 {
        return Err(invalid!("target size must be positive"));
    }
    if image.width() == target && image.height() == target {
        return Ok((image.clone(), mask.clone()));
    }
    if !letterbox {
        return Ok((resize_image(image, target, target), resize_mask(mask, target, target)));
    }
    let scale = target as f64 / image.width().max(image.height()) as f64;
    let w = ((image.width() as f64 * scale).round() as usize).clamp(1, target);
    let h = ((image.height() as f64 * scale).round() as usize).clamp(1, target);
    let img = resize_image(image, w, h);
    let m = resize_mask(mask, w, h);
    let (ox, oy) = ((target - w) / 2, (target - h) / 2);
    let mut out_img = RasterImage::filled(target, target, PAD_RGB);
    let mut out_mask = LabelMask::zeros(target, target);
    for y in 0..h {
        for x in 0..w {
            out_img.set_pixel(x + ox, y + oy, img.pixel(x, y));
            out_mask.set(x + ox, y + oy, m.get(x, y));
        }
    }
    Ok((out_img, out_mask))
}

pub fn resize_image(image: &RasterImage, width: usize, height: usize) -> RasterImage {
    if image.width() == width && image.height() == height {
        return image.clone();
    }
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.data().to_vec())
        .expect("raster invariant guarantees buffer size");
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    let mut r = RasterImage::new(width, height, out.into_raw()).expect("resize output size");
    r.resolution_microns_per_pixel = image
        .resolution_microns_per_pixel
        .map(|m| m * image.width() as f64 / width as f64);
    r
}

/// Nearest-neighbour using pixel-centre alignment.
pub fn resize_mask(mask: &LabelMask, width: usize, height: usize) -> LabelMask {
    let sx = mask.width() as f64 / width as f64;
    let sy = mask.height() as f64 / height as f64;
    let mut out = LabelMask::zeros(width, height);
    for y in 0..height {
        let src_y = (((y as f64 + 0.5) * sy) as usize).min(mask.height() - 1);
        for x in 0..width {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(mask.width() - 1);
            out.set(x, y, mask.get(src_x, src_y));
        }
    }
    out
}

/// Channel-major `[3, H, W]` input tensor data.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ChannelStats {
    /// Statistics expected by ImageNet-pretrained encoders.
    pub const IMAGENET: ChannelStats =
        ChannelStats { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] };
}

/// Scales samples to [0, 1], then optionally standardises per channel.
pub fn normalize_image(image: &RasterImage, stats: Option<&ChannelStats>) -> NormalizedImage {
    let (w, h) = (image.width(), image.height());
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in image.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            let mut v = px[c] as f32 / 255.0;
            if let Some(s) = stats {
                v = (v - s.mean[c]) / s.std[c];
            }
            data[c * plane + i] = v;
        }
    }
    NormalizedImage { width: w, height: h, data }
}

/// Seeded permutation of `0..n`.
pub fn shuffle_order(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Assigns train/val/test labels after a seeded shuffle. Val and test sizes are
/// floored; the remainder goes to train. Output keeps the input order.
pub fn split_dataset(
    samples: &[AnnotatedSample],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<AnnotatedSample>> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(invalid!("split ratios must be finite and non-negative, got {ratios:?}"));
    }
    if ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(invalid!("split ratios must sum to 1, got {}", tr + va + te));
    }
    if samples.is_empty() {
        return Err(invalid!("cannot split an empty sample list"));
    }
    crate::io::check_unique_ids(samples)?;
    let n = samples.len();
    // tolerance keeps e.g. 100 * 0.29 from flooring to 28
    let n_val = (n as f64 * va + 1e-9).floor() as usize;
    let n_test = (n as f64 * te + 1e-9).floor() as usize;
    let order = shuffle_order(n, seed);
    let mut out = samples.to_vec();
    for (rank, &i) in order.iter().enumerate() {
        out[i].split = if rank < n_val {
            Split::Val
        } else if rank < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(out)
}
