//! Raster and manifest file formats.
//!
//! Masks are single-channel 8-bit PNGs whose values are class ids. Images are
//! 8-bit RGB PNG or TIFF. Manifests are JSON arrays of [`AnnotatedSample`].

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{invalid, Error, Result};
use crate::types::{AnnotatedSample, LabelMask, RasterImage, Split};

pub fn read_image(path: &Path) -> Result<RasterImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    RasterImage::new(w as usize, h as usize, img.into_raw())
}

/// Writes PNG unless the extension says TIFF.
pub fn write_image(path: &Path, image: &RasterImage) -> Result<()> {
    ensure_parent(path)?;
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.data().to_vec())
        .ok_or_else(|| invalid!("image buffer does not match its dimensions"))?;
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("tif") || e.eq_ignore_ascii_case("tiff") => {
            ImageFormat::Tiff
        }
        _ => ImageFormat::Png,
    };
    buf.save_with_format(path, format).map_err(|e| Error::image(path, e))
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(invalid!(
                "{} is {:?}, masks must be single-channel 8-bit",
                path.display(),
                other.color()
            ))
        }
    };
    let (w, h) = gray.dimensions();
    LabelMask::new(w as usize, h as usize, gray.into_raw())
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    ensure_parent(path)?;
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .ok_or_else(|| invalid!("mask buffer does not match its dimensions"))?;
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| Error::image(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<AnnotatedSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let samples: Vec<AnnotatedSample> = serde_json::from_str(&text)?;
    check_unique_ids(&samples)?;
    Ok(samples)
}

pub fn write_manifest(path: &Path, samples: &[AnnotatedSample]) -> Result<()> {
    check_unique_ids(samples)?;
    write_json(path, &samples)
}

pub fn check_unique_ids(samples: &[AnnotatedSample]) -> Result<()> {
    let mut seen = HashSet::new();
    for s in samples {
        if !seen.insert(s.sample_id.as_str()) {
            return Err(invalid!("duplicate sample_id {:?} in manifest", s.sample_id));
        }
    }
    Ok(())
}

/// Resolves a manifest entry path relative to the manifest's directory.
pub fn resolve(manifest_path: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn samples_in(samples: &[AnnotatedSample], split: Split) -> Vec<&AnnotatedSample> {
    samples.iter().filter(|s| s.split == split).collect()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}
