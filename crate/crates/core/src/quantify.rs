//! TH-stain quantification: positive-pixel detection by blue normalisation and
//! a tissue gate, Beer–Lambert optical density, and area-normalised region OD.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{ClassCatalog, LabelMask, RasterImage};

/// Upper bound of per-pixel OD: `-log10(1/255)`.
pub fn max_optical_density() -> f64 {
    255f64.log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StainConfig {
    /// Pixels whose blue-normalised value falls below this are stain candidates.
    pub blue_norm_threshold: f64,
    /// Pixels at or above this grayscale level are glass and never positive.
    pub tissue_intensity_max: f64,
    pub grayscale_weights: [f64; 3],
}

impl Default for StainConfig {
    fn default() -> Self {
        Self {
            blue_norm_threshold: 110.0,
            tissue_intensity_max: 230.0,
            grayscale_weights: [0.299, 0.587, 0.114],
        }
    }
}

impl StainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.blue_norm_threshold;
        if !(t > 0.0 && t < 255.0) {
            return Err(invalid!("blue_norm_threshold must be in (0, 255), got {t}"));
        }
        let g = self.tissue_intensity_max;
        if !(g > 0.0 && g <= 255.0) {
            return Err(invalid!("tissue_intensity_max must be in (0, 255], got {g}"));
        }
        if self.grayscale_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid!("grayscale weights must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn grayscale(&self, rgb: [u8; 3]) -> f64 {
        let [wr, wg, wb] = self.grayscale_weights;
        wr * rgb[0] as f64 + wg * rgb[1] as f64 + wb * rgb[2] as f64
    }

    pub fn is_positive(&self, rgb: [u8; 3]) -> bool {
        blue_normalize(rgb) < self.blue_norm_threshold
            && self.grayscale(rgb) < self.tissue_intensity_max
    }
}

/// `255 * B / (R + G + B)`; black maps to 255 so it never reads as stain.
pub fn blue_normalize(rgb: [u8; 3]) -> f64 {
    let sum = rgb[0] as u32 + rgb[1] as u32 + rgb[2] as u32;
    if sum == 0 {
        return 255.0;
    }
    255.0 * rgb[2] as f64 / sum as f64
}

/// Beer–Lambert absorbance `-log10(I / 255)` with intensities below 1 clamped to 1.
pub fn optical_density(intensity: f64) -> Result<f64> {
    if !(0.0..=255.0).contains(&intensity) {
        return Err(invalid!("intensity {intensity} is outside [0, 255]"));
    }
    Ok(-(intensity.max(1.0) / 255.0).log10())
}

pub(crate) fn od_unchecked(intensity: f64) -> f64 {
    -(intensity.clamp(1.0, 255.0) / 255.0).log10()
}

/// Row-major boolean raster of TH-positive pixels.
pub fn th_positive_mask(image: &RasterImage, config: &StainConfig) -> Vec<bool> {
    image.pixels().map(|p| config.is_positive(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionODResult {
    pub region: String,
    pub region_area: u64,
    pub positive_pixel_count: u64,
    pub summed_od: f64,
    /// `summed_od / region_area`, or `None` when the region is empty.
    pub normalized_od: Option<f64>,
}

impl RegionODResult {
    pub fn is_empty(&self) -> bool {
        self.region_area == 0
    }
}

/// OD summed over TH-positive pixels of one region, normalised by the full region area.
pub fn region_od(
    image: &RasterImage,
    mask: &LabelMask,
    region_class: u8,
    region_name: &str,
    config: &StainConfig,
) -> Result<RegionODResult> {
    check_dims(image, mask)?;
    config.validate()?;
    let mut area = 0u64;
    let mut positive = 0u64;
    let mut summed = 0.0;
    for (rgb, &c) in image.pixels().zip(mask.data()) {
        if c != region_class {
            continue;
        }
        area += 1;
        if config.is_positive(rgb) {
            positive += 1;
            summed += od_unchecked(config.grayscale(rgb));
        }
    }
    Ok(RegionODResult {
        region: region_name.to_string(),
        region_area: area,
        positive_pixel_count: positive,
        summed_od: summed,
        normalized_od: (area > 0).then(|| summed / area as f64),
    })
}

fn check_dims(image: &RasterImage, mask: &LabelMask) -> Result<()> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(invalid!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        ));
    }
    Ok(())
}

/// Nearest-neighbour mask upscaling by an integer factor, for applying a
/// low-resolution segmentation to a higher-resolution stain image.
pub fn upscale_mask(mask: &LabelMask, factor: usize) -> Result<LabelMask> {
    if factor == 0 {
        return Err(invalid!("mask scale factor must be >= 1"));
    }
    let (w, h) = (mask.width() * factor, mask.height() * factor);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(mask.get(x / factor, y / factor));
        }
    }
    LabelMask::new(w, h, data)
}

/// One result per foreground class of the catalog; absent regions come back empty.
pub fn quantify_sample(
    image: &RasterImage,
    mask: &LabelMask,
    catalog: &ClassCatalog,
    config: &StainConfig,
    mask_scale: usize,
) -> Result<Vec<RegionODResult>> {
    mask.validate(catalog)?;
    let scaled;
    let mask = if mask_scale > 1 {
        scaled = upscale_mask(mask, mask_scale)?;
        &scaled
    } else {
        mask
    };
    catalog
        .foreground()
        .into_iter()
        .map(|c| region_od(image, mask, c, catalog.name(c).unwrap_or("?"), config))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Left,
    Right,
}

/// Splits the section at the vertical midline and quantifies each half.
pub fn quantify_hemispheres(
    image: &RasterImage,
    mask: &LabelMask,
    catalog: &ClassCatalog,
    config: &StainConfig,
) -> Result<[(Hemisphere, Vec<RegionODResult>); 2]> {
    check_dims(image, mask)?;
    let mid = mask.width() / 2;
    let half = |keep_left: bool| {
        let mut m = mask.clone();
        for y in 0..m.height() {
            for x in 0..m.width() {
                if (x < mid) != keep_left {
                    m.set(x, y, 0);
                }
            }
        }
        m
    };
    Ok([
        (Hemisphere::Left, quantify_sample(image, &half(true), catalog, config, 1)?),
        (Hemisphere::Right, quantify_sample(image, &half(false), catalog, config, 1)?),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Gt,
    Model,
}

impl MaskSource {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskSource::Gt => "gt",
            MaskSource::Model => "model",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdRow {
    pub sample_id: String,
    pub region: String,
    pub mask_source: MaskSource,
    pub region_area: u64,
    pub positive_pixels: u64,
    pub summed_od: f64,
    /// Empty cell in CSV for an empty region.
    pub normalized_od: Option<f64>,
}

impl OdRow {
    pub fn from_result(sample_id: &str, source: MaskSource, r: &RegionODResult) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            region: r.region.clone(),
            mask_source: source,
            region_area: r.region_area,
            positive_pixels: r.positive_pixel_count,
            summed_od: r.summed_od,
            normalized_od: r.normalized_od,
        }
    }
}

pub fn write_od_csv(path: &std::path::Path, rows: &[OdRow]) -> Result<()> {
    if let Some(p) = path.parent() {
        crate::io::ensure_dir(p)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| crate::Error::io(path, e))?;
    Ok(())
}

pub fn read_od_csv(path: &std::path::Path) -> Result<Vec<OdRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

const PURPLE: [u8; 3] = [150, 40, 200];
const RED: [u8; 3] = [230, 20, 20];
const GREEN: [u8; 3] = [20, 200, 40];

/// Positive pixels painted purple, SNr outlined red and SNCD green.
pub fn overlay(image: &RasterImage, mask: &LabelMask, config: &StainConfig) -> Result<RasterImage> {
    check_dims(image, mask)?;
    let mut out = image.clone();
    let (w, h) = (mask.width(), mask.height());
    for y in 0..h {
        for x in 0..w {
            let c = mask.get(x, y);
            if c != 0 && config.is_positive(image.pixel(x, y)) {
                out.set_pixel(x, y, PURPLE);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let c = mask.get(x, y);
            if c == 0 {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || mask.get(x - 1, y) != c
                || mask.get(x + 1, y) != c
                || mask.get(x, y - 1) != c
                || mask.get(x, y + 1) != c;
            if edge {
                out.set_pixel(x, y, if c == 1 { RED } else { GREEN });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn blue_normalize_examples() {
        assert_abs_diff_eq!(blue_normalize([100, 100, 100]), 85.0, epsilon = 1e-12);
        assert_abs_diff_eq!(blue_normalize([120, 80, 40]), 42.5, epsilon = 1e-12);
        assert_abs_diff_eq!(blue_normalize([60, 70, 150]), 255.0 * 150.0 / 280.0, epsilon = 1e-12);
        assert_abs_diff_eq!(blue_normalize([60, 70, 150]), 136.607, epsilon = 1e-3);
        assert_eq!(blue_normalize([0, 0, 0]), 255.0);
    }

    #[test]
    fn positivity_rules() {
        let cfg = StainConfig::default();
        // glass passes the blue rule but fails the tissue gate
        assert!(blue_normalize([255, 255, 255]) < cfg.blue_norm_threshold);
        assert!(!cfg.is_positive([255, 255, 255]));
        assert_abs_diff_eq!(cfg.grayscale([120, 80, 40]), 87.4, epsilon = 1e-9);
        assert!(cfg.is_positive([120, 80, 40]));
        assert!(!cfg.is_positive([60, 70, 150]));
    }

    #[test]
    fn optical_density_examples() {
        assert_eq!(optical_density(255.0).unwrap(), 0.0);
        assert_abs_diff_eq!(optical_density(0.0).unwrap(), 2.40654, epsilon = 1e-5);
        assert_eq!(optical_density(0.0).unwrap(), optical_density(1.0).unwrap());
        assert_abs_diff_eq!(optical_density(127.5).unwrap(), 0.30103, epsilon = 1e-5);
        assert!(optical_density(-0.5).is_err());
        assert!(optical_density(255.5).is_err());
        assert!(optical_density(f64::NAN).is_err());
    }

    #[test]
    fn optical_density_monotone_over_8bit_range() {
        let ods: Vec<f64> = (0..=255).map(|i| optical_density(i as f64).unwrap()).collect();
        // 0 and 1 share a value through the clamp
        assert_eq!(ods[0], ods[1]);
        for w in ods[1..].windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn region_od_hand_arithmetic() {
        // weights chosen so the red pixel has OD 1.0 and the green pixel OD 0.5
        let cfg = StainConfig {
            grayscale_weights: [0.1, 10f64.powf(-0.5), 0.0],
            ..Default::default()
        };
        let mut img = RasterImage::filled(2, 2, [0, 0, 255]);
        img.set_pixel(0, 0, [255, 0, 0]);
        img.set_pixel(1, 0, [0, 255, 0]);
        let mask = LabelMask::new(2, 2, vec![1; 4]).unwrap();
        let r = region_od(&img, &mask, 1, "SNr", &cfg).unwrap();
        assert_eq!(r.region_area, 4);
        assert_eq!(r.positive_pixel_count, 2);
        assert_abs_diff_eq!(r.summed_od, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.normalized_od.unwrap(), 0.375, epsilon = 1e-12);
    }

    #[test]
    fn empty_and_unstained_regions() {
        let cfg = StainConfig::default();
        let img = RasterImage::filled(3, 3, [60, 70, 150]);
        let mut mask = LabelMask::zeros(3, 3);
        mask.set(1, 1, 1);
        let r = region_od(&img, &mask, 1, "SNr", &cfg).unwrap();
        assert_eq!(r.normalized_od, Some(0.0));
        let res = quantify_sample(&img, &mask, &ClassCatalog::default(), &cfg, 1).unwrap();
        assert_eq!(res.len(), 2);
        assert!(!res[0].is_empty());
        assert!(res[1].is_empty());
        assert_eq!(res[1].normalized_od, None);
    }

    #[test]
    fn region_od_rejects_mismatched_dims() {
        let img = RasterImage::filled(3, 3, [0, 0, 0]);
        let mask = LabelMask::zeros(3, 2);
        assert!(region_od(&img, &mask, 1, "SNr", &StainConfig::default()).is_err());
    }

    #[test]
    fn upscaled_mask_matches_high_res_quantification() {
        let cfg = StainConfig::default();
        let mut img = RasterImage::filled(4, 4, [60, 70, 150]);
        img.set_pixel(0, 0, [120, 80, 40]);
        img.set_pixel(1, 1, [120, 80, 40]);
        let low = LabelMask::new(2, 2, vec![1, 0, 0, 2]).unwrap();
        let res = quantify_sample(&img, &low, &ClassCatalog::default(), &cfg, 2).unwrap();
        assert_eq!(res[0].region_area, 4);
        assert_eq!(res[0].positive_pixel_count, 2);
        assert_eq!(res[1].region_area, 4);
    }

    #[test]
    fn od_csv_round_trip_keeps_empty_marker() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            OdRow {
                sample_id: "s0".into(),
                region: "SNr".into(),
                mask_source: MaskSource::Gt,
                region_area: 10,
                positive_pixels: 3,
                summed_od: 1.25,
                normalized_od: Some(0.125),
            },
            OdRow {
                sample_id: "s0".into(),
                region: "SNCD".into(),
                mask_source: MaskSource::Model,
                region_area: 0,
                positive_pixels: 0,
                summed_od: 0.0,
                normalized_od: None,
            },
        ];
        let p = dir.path().join("od.csv");
        write_od_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(
            "sample_id,region,mask_source,region_area,positive_pixels,summed_od,normalized_od"
        ));
        assert_eq!(read_od_csv(&p).unwrap(), rows);
    }

    proptest::proptest! {
        #[test]
        fn prop_darkening_positive_pixel_never_lowers_sum(
            r in 40u8..200, k in 1u8..40, seed in 0u64..1000
        ) {
            let cfg = StainConfig::default();
            let base = [r, (r as u16 * 2 / 3) as u8, r / 3];
            let darker = [base[0].saturating_sub(k), base[1].saturating_sub(k), base[2].saturating_sub(k / 3)];
            let mut img = RasterImage::filled(2, 1, [60, 70, 150]);
            img.set_pixel(0, 0, base);
            let mask = LabelMask::new(2, 1, vec![1, 1]).unwrap();
            let a = region_od(&img, &mask, 1, "SNr", &cfg).unwrap();
            img.set_pixel(0, 0, darker);
            let b = region_od(&img, &mask, 1, "SNr", &cfg).unwrap();
            if cfg.is_positive(base) && cfg.is_positive(darker) {
                proptest::prop_assert!(b.summed_od >= a.summed_od, "seed {}", seed);
            }
        }

        #[test]
        fn prop_normalized_od_bounded_and_tiling_invariant(
            w in 1usize..8, h in 1usize..8, seed in proptest::prelude::any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = StainConfig::default();
            let data: Vec<u8> = (0..w * h * 3).map(|_| rng.random()).collect();
            let img = RasterImage::new(w, h, data).unwrap();
            let mdata: Vec<u8> = (0..w * h).map(|_| rng.random_range(0..3)).collect();
            let mask = LabelMask::new(w, h, mdata).unwrap();
            let r = region_od(&img, &mask, 1, "SNr", &cfg).unwrap();
            if let Some(n) = r.normalized_od {
                proptest::prop_assert!((0.0..=max_optical_density()).contains(&n));
            }
            proptest::prop_assert!(r.positive_pixel_count <= r.region_area);
            // tile horizontally: doubles area and sum
            let mut tdata = Vec::new();
            let mut tmask = Vec::new();
            for y in 0..h {
                for _ in 0..2 {
                    tdata.extend_from_slice(&img.data()[y * w * 3..(y + 1) * w * 3]);
                    tmask.extend_from_slice(&mask.data()[y * w..(y + 1) * w]);
                }
            }
            let timg = RasterImage::new(2 * w, h, tdata).unwrap();
            let tm = LabelMask::new(2 * w, h, tmask).unwrap();
            let t = region_od(&timg, &tm, 1, "SNr", &cfg).unwrap();
            proptest::prop_assert_eq!(t.region_area, 2 * r.region_area);
            match (r.normalized_od, t.normalized_od) {
                (Some(a), Some(b)) => proptest::prop_assert!((a - b).abs() < 1e-12),
                (None, None) => {}
                _ => proptest::prop_assert!(false),
            }
            // positivity is per pixel, so order cannot matter
            let pos = th_positive_mask(&img, &cfg);
            let rev: Vec<u8> = img.data().chunks_exact(3).rev().flatten().copied().collect();
            let rimg = RasterImage::new(w, h, rev).unwrap();
            let mut rpos = th_positive_mask(&rimg, &cfg);
            rpos.reverse();
            proptest::prop_assert_eq!(pos, rpos);
        }
    }
}
