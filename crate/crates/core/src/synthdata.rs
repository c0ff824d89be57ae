//! Phantom brain sections with exactly known SNr/SNCD masks and TH stain.
//!
//! Each phantom is painted from a single sampled geometry, so the label mask and
//! the stained pixels agree by construction. The generator also returns the
//! region optical densities computed from the pixels it painted, which serves as
//! an independent oracle for [`crate::quantify`].

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::preprocess::split_dataset;
use crate::quantify::{self, Hemisphere, MaskSource, OdRow, RegionODResult, StainConfig};
use crate::types::{AnnotatedSample, ClassCatalog, LabelMask, RasterImage, Split, SNCD, SNR};
use crate::{io, seeds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionGeometry {
    /// Max displacement of each complex centre, as a fraction of image size.
    pub center_jitter: f64,
    /// SNr semi-axes ranges (major, minor) as fractions of image size.
    pub snr_major: [f64; 2],
    pub snr_minor: [f64; 2],
    pub sncd_major: [f64; 2],
    pub sncd_minor: [f64; 2],
    /// Vertical gap between SNr top and SNCD bottom, fraction of image size.
    pub gap: f64,
    /// Max tilt of a complex in degrees.
    pub max_tilt_deg: f64,
    /// Relative amplitude of the radial boundary noise.
    pub boundary_noise: f64,
    /// Inclusive range of the number of boundary harmonics.
    pub harmonics: [u32; 2],
}

impl Default for RegionGeometry {
    fn default() -> Self {
        Self {
            center_jitter: 0.06,
            snr_major: [0.15, 0.21],
            snr_minor: [0.07, 0.10],
            sncd_major: [0.11, 0.16],
            sncd_minor: [0.035, 0.05],
            gap: 0.02,
            max_tilt_deg: 12.0,
            boundary_noise: 0.08,
            harmonics: [3, 6],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    /// One SN complex near the centre of the section.
    Single,
    /// Two mirrored complexes; the injected side is painted at a reduced TH scale.
    HemisphereLoss { injected: Hemisphere, injected_scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub nissl_background: [u8; 3],
    pub snr_tint: [u8; 3],
    pub sncd_tint: [u8; 3],
    pub glass: [u8; 3],
    pub th_stain: [u8; 3],
    /// TH intensity scale in [0, 1] for SNr and SNCD; 0 paints no stain.
    pub th_intensity_scale: [f64; 2],
    /// Per-phantom scale is drawn from `[scale * (1 - spread), scale]`.
    pub th_scale_spread: f64,
    /// Fraction of region pixels stained at scale 1.
    pub th_coverage: f64,
    /// Multiplicative per-pixel jitter on stain and tissue colours.
    pub color_jitter: f64,
    pub region_geometry: RegionGeometry,
    pub layout: Layout,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            n_samples: 10,
            seed: 0,
            nissl_background: [130, 150, 225],
            snr_tint: [150, 125, 225],
            sncd_tint: [80, 90, 200],
            glass: [244, 244, 240],
            th_stain: [120, 80, 40],
            th_intensity_scale: [1.0, 1.0],
            th_scale_spread: 0.0,
            th_coverage: 0.75,
            color_jitter: 0.10,
            region_geometry: RegionGeometry::default(),
            layout: Layout::Single,
        }
    }
}

impl PhantomSpec {
    pub fn hemisphere_loss(injected: Hemisphere, injected_scale: f64) -> Self {
        let mut spec = Self {
            layout: Layout::HemisphereLoss { injected, injected_scale },
            ..Self::default()
        };
        let g = &mut spec.region_geometry;
        g.center_jitter = 0.03;
        g.snr_major = [0.10, 0.13];
        g.snr_minor = [0.05, 0.065];
        g.sncd_major = [0.075, 0.10];
        g.sncd_minor = [0.025, 0.035];
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(invalid!("image_size must be at least 16, got {}", self.image_size));
        }
        for (name, s) in ["SNr", "SNCD"].iter().zip(self.th_intensity_scale) {
            if !(0.0..=1.0).contains(&s) {
                return Err(invalid!("{name} th_intensity_scale {s} outside [0, 1]"));
            }
        }
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(invalid!("{name} {v} outside [0, 1]"))
            }
        };
        unit("th_scale_spread", self.th_scale_spread)?;
        unit("th_coverage", self.th_coverage)?;
        unit("color_jitter", self.color_jitter)?;
        if let Layout::HemisphereLoss { injected_scale, .. } = self.layout {
            unit("injected_scale", injected_scale)?;
        }
        let g = &self.region_geometry;
        for (name, r) in [
            ("snr_major", g.snr_major),
            ("snr_minor", g.snr_minor),
            ("sncd_major", g.sncd_major),
            ("sncd_minor", g.sncd_minor),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(invalid!("{name} range must satisfy 0 < lo <= hi, got {r:?}"));
            }
        }
        if g.harmonics[0] == 0 || g.harmonics[0] > g.harmonics[1] {
            return Err(invalid!("harmonics range must satisfy 1 <= lo <= hi"));
        }
        if !(0.0..0.5).contains(&g.boundary_noise) {
            return Err(invalid!("boundary_noise must be in [0, 0.5)"));
        }
        // ground truth assumes stain always reads positive and tints never do
        let cfg = StainConfig::default();
        let j = self.color_jitter;
        for (name, tint) in [("snr_tint", self.snr_tint), ("sncd_tint", self.sncd_tint)] {
            if [1.0 - j, 1.0, 1.0 + j].iter().any(|&f| cfg.is_positive(scale_rgb(tint, f))) {
                return Err(invalid!("{name} {tint:?} reads as TH-positive under color_jitter {j}"));
            }
        }
        if [1.0 - j, 1.0 + j, 1.6 * (1.0 + j)].iter().any(|&f| !cfg.is_positive(scale_rgb(self.th_stain, f))) {
            return Err(invalid!("th_stain {:?} does not read as TH-positive at every intensity", self.th_stain));
        }
        Ok(())
    }
}

/// A generated phantom with its analytic region ODs.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: RasterImage,
    pub mask: LabelMask,
    /// One entry per foreground class, computed from painted pixels.
    pub ground_truth: Vec<RegionODResult>,
    /// TH scales actually used, per complex: `[snr, sncd]` for each of left, right.
    pub th_scales: Vec<[f64; 2]>,
    /// Row-major record of which pixels received TH stain.
    pub stained: Vec<bool>,
}

/// Irregular ellipse with sinusoidal radial boundary noise.
#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    major: f64,
    minor: f64,
    tilt: f64,
    harmonics: Vec<(f64, f64, f64)>,
    /// Bend applied along the major axis so SNCD reads as a crescent.
    bend: f64,
}

impl Blob {
    fn sample(rng: &mut ChaCha8Rng, cx: f64, cy: f64, major: f64, minor: f64, g: &RegionGeometry) -> Self {
        let n = rng.random_range(g.harmonics[0]..=g.harmonics[1]);
        let harmonics = (0..n)
            .map(|k| {
                let amp = g.boundary_noise * rng.random_range(0.2..1.0) / n as f64;
                let phase = rng.random_range(0.0..2.0 * PI);
                ((k + 2) as f64, amp, phase)
            })
            .collect();
        let tilt = rng.random_range(-g.max_tilt_deg..=g.max_tilt_deg).to_radians();
        Self { cx, cy, major, minor, tilt, harmonics, bend: 0.0 }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.tilt.sin_cos();
        let u = c * dx + s * dy;
        // crescent: push the minor axis down towards the tips
        let v = -s * dx + c * dy + self.bend * (u / self.major).powi(2) * self.minor;
        let rho = ((u / self.major).powi(2) + (v / self.minor).powi(2)).sqrt();
        let phi = v.atan2(u);
        let r: f64 = 1.0
            + self
                .harmonics
                .iter()
                .map(|(k, a, p)| a * (k * phi + p).sin())
                .sum::<f64>();
        rho <= r
    }

    fn mirrored(&self, size: f64) -> Self {
        let mut b = self.clone();
        b.cx = size - 1.0 - self.cx;
        b.tilt = -self.tilt;
        // mirror x -> phi maps to pi - phi
        b.harmonics = self
            .harmonics
            .iter()
            .map(|&(k, a, p)| (k, a, if (k as i64) % 2 == 0 { PI - p } else { -p }))
            .collect();
        b
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 100;
const MIN_AREA_FRACTION: f64 = 0.005;
const MAX_AREA_FRACTION: f64 = 0.15;

/// Deterministic in `(spec.seed, index)`.
pub fn generate_phantom(spec: &PhantomSpec, index: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(spec.seed, index));
    let size = spec.image_size;
    let mask = place_regions(spec, &mut rng)?;

    let sides: Vec<Option<Hemisphere>> = match spec.layout {
        Layout::Single => vec![None],
        Layout::HemisphereLoss { .. } => vec![Some(Hemisphere::Left), Some(Hemisphere::Right)],
    };
    let spread = spec.th_scale_spread;
    let base: [f64; 2] = spec
        .th_intensity_scale
        .map(|s| s * (1.0 - spread * rng.random_range(0.0..=1.0)));
    let th_scales: Vec<[f64; 2]> = sides
        .iter()
        .map(|side| match (spec.layout, side) {
            (Layout::HemisphereLoss { injected, injected_scale }, Some(h)) if *h == injected => {
                base.map(|s| s * injected_scale)
            }
            _ => base,
        })
        .collect();

    let scale_at = |x: usize, class: u8| -> f64 {
        let side = if th_scales.len() == 2 && x >= size / 2 { 1 } else { 0 };
        th_scales[side][(class - 1) as usize]
    };

    let stain_cfg = StainConfig::default();
    let mut image = RasterImage::filled(size, size, spec.glass);
    let mut stained = vec![false; size * size];
    let c = (size as f64 - 1.0) / 2.0;
    let (tissue_rx, tissue_ry) = (0.47 * size as f64, 0.43 * size as f64);
    let jitter = spec.color_jitter;

    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 - c) / tissue_rx;
            let dy = (y as f64 - c) / tissue_ry;
            let class = mask.get(x, y);
            let in_tissue = dx * dx + dy * dy <= 1.0 || class != 0;
            let f = 1.0 + rng.random_range(-jitter..=jitter);
            let px = if !in_tissue {
                scale_rgb(spec.glass, 1.0 + rng.random_range(-0.01..=0.01))
            } else {
                let tint = match class {
                    SNR => spec.snr_tint,
                    SNCD => spec.sncd_tint,
                    _ => spec.nissl_background,
                };
                let s = if class == 0 { 0.0 } else { scale_at(x, class) };
                if s > 0.0 && rng.random_range(0.0..1.0) < spec.th_coverage * s {
                    stained[y * size + x] = true;
                    // weaker TH reads lighter brown
                    scale_rgb(spec.th_stain, f * (1.0 + 0.6 * (1.0 - s)))
                } else {
                    scale_rgb(tint, f)
                }
            };
            image.set_pixel(x, y, px);
        }
    }

    let catalog = ClassCatalog::default();
    let ground_truth = catalog
        .foreground()
        .into_iter()
        .map(|class| {
            let mut area = 0u64;
            let mut positive = 0u64;
            let mut summed = 0.0;
            for (i, &m) in mask.data().iter().enumerate() {
                if m != class {
                    continue;
                }
                area += 1;
                if stained[i] {
                    positive += 1;
                    let rgb = image.pixel(i % size, i / size);
                    summed += quantify::od_unchecked(stain_cfg.grayscale(rgb));
                }
            }
            RegionODResult {
                region: catalog.name(class).unwrap_or("?").to_string(),
                region_area: area,
                positive_pixel_count: positive,
                summed_od: summed,
                normalized_od: (area > 0).then(|| summed / area as f64),
            }
        })
        .collect();

    Ok(Phantom { image, mask, ground_truth, th_scales, stained })
}

fn scale_rgb(rgb: [u8; 3], f: f64) -> [u8; 3] {
    rgb.map(|v| (v as f64 * f).round().clamp(0.0, 255.0) as u8)
}

fn place_regions(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<LabelMask> {
    let size = spec.image_size;
    let s = size as f64;
    let g = &spec.region_geometry;
    let total = (size * size) as f64;
    let mut last_problem = String::new();
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let jit = |rng: &mut ChaCha8Rng| rng.random_range(-g.center_jitter..=g.center_jitter) * s;
        let (base_x, base_y) = match spec.layout {
            Layout::Single => (0.5 * s, 0.56 * s),
            Layout::HemisphereLoss { .. } => (0.28 * s, 0.56 * s),
        };
        let cx = base_x + jit(rng);
        let cy = base_y + jit(rng);
        let snr_a = rng.random_range(g.snr_major[0]..=g.snr_major[1]) * s;
        let snr_b = rng.random_range(g.snr_minor[0]..=g.snr_minor[1]) * s;
        let sncd_a = rng.random_range(g.sncd_major[0]..=g.sncd_major[1]) * s;
        let sncd_b = rng.random_range(g.sncd_minor[0]..=g.sncd_minor[1]) * s;
        let snr = Blob::sample(rng, cx, cy, snr_a, snr_b, g);
        // SNCD sits dorsal to SNr, offset medially
        let offset_x = rng.random_range(-0.3..=0.3) * snr_a;
        let sncd_cy = cy - snr_b * (1.0 + g.boundary_noise) - g.gap * s - sncd_b * (1.0 + g.boundary_noise);
        let mut sncd = Blob::sample(rng, cx + offset_x, sncd_cy, sncd_a, sncd_b, g);
        sncd.bend = rng.random_range(0.0..=0.8);

        let mut blobs = vec![(SNR, snr.clone()), (SNCD, sncd.clone())];
        if matches!(spec.layout, Layout::HemisphereLoss { .. }) {
            blobs.push((SNR, snr.mirrored(s)));
            blobs.push((SNCD, sncd.mirrored(s)));
        }

        let mut mask = LabelMask::zeros(size, size);
        let mut overlap = false;
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64, y as f64);
                let mut hit = 0u8;
                for (class, blob) in &blobs {
                    if blob.contains(fx, fy) {
                        if hit != 0 && hit != *class {
                            overlap = true;
                        }
                        hit = *class;
                    }
                }
                mask.set(x, y, hit);
            }
        }
        if overlap {
            last_problem = "SNr and SNCD overlap".into();
            continue;
        }
        let frac = |c: u8| mask.count(c) as f64 / total;
        let (fa, fb) = (frac(SNR), frac(SNCD));
        let ok = |f: f64| (MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&f);
        if !ok(fa) || !ok(fb) {
            last_problem = format!("region area fractions SNr {fa:.4}, SNCD {fb:.4} outside [0.005, 0.15]");
            continue;
        }
        if touches_other_class(&mask) {
            last_problem = "SNr and SNCD touch".into();
            continue;
        }
        return Ok(mask);
    }
    Err(Error::Generation(format!(
        "no valid placement after {MAX_PLACEMENT_ATTEMPTS} attempts ({last_problem})"
    )))
}

fn touches_other_class(mask: &LabelMask) -> bool {
    let (w, h) = (mask.width(), mask.height());
    for y in 0..h {
        for x in 0..w {
            let c = mask.get(x, y);
            if c == 0 {
                continue;
            }
            let neighbours = [(x + 1, y), (x, y + 1)];
            for (nx, ny) in neighbours {
                if nx < w && ny < h {
                    let d = mask.get(nx, ny);
                    if d != 0 && d != c {
                        return true;
                    }
                }
            }
        }
    }
    false
}

pub fn sample_id(index: u64) -> String {
    format!("phantom_{index:04}")
}

/// Writes `images/`, `masks/`, `manifest.json` and `ground_truth_od.csv` under `out_dir`.
pub fn generate_dataset(spec: &PhantomSpec, out_dir: &Path) -> Result<Vec<AnnotatedSample>> {
    spec.validate()?;
    io::ensure_dir(out_dir)?;
    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut od_rows = Vec::new();
    for i in 0..spec.n_samples as u64 {
        let p = generate_phantom(spec, i)?;
        let id = sample_id(i);
        let image_rel = format!("images/{id}.png");
        let mask_rel = format!("masks/{id}.png");
        io::write_image(&out_dir.join(&image_rel), &p.image)?;
        io::write_mask(&out_dir.join(&mask_rel), &p.mask)?;
        od_rows.extend(p.ground_truth.iter().map(|r| OdRow::from_result(&id, MaskSource::Gt, r)));
        samples.push(AnnotatedSample {
            image_path: image_rel,
            mask_path: mask_rel,
            sample_id: id,
            split: Split::Train,
        });
    }
    let manifest = if samples.is_empty() {
        samples
    } else {
        split_dataset(&samples, (0.8, 0.1, 0.1), spec.seed)?
    };
    io::write_manifest(&out_dir.join("manifest.json"), &manifest)?;
    quantify::write_od_csv(&out_dir.join("ground_truth_od.csv"), &od_rows)?;
    Ok(manifest)
}
