//! Stochastic training-time transforms applied jointly to an image and its mask.
//!
//! Geometric transforms share sampled parameters between the two rasters; the
//! image is resampled bilinearly and the mask by nearest neighbour. Gaussian
//! noise touches the image only.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{LabelMask, RasterImage};
use crate::{io, seeds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub rotation_max_deg: f64,
    pub rotation_p: f64,
    pub vertical_flip_p: f64,
    pub horizontal_flip_p: f64,
    pub random_rot90_p: f64,
    pub transpose_p: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub elastic_p: f64,
    /// Variance range in 8-bit units squared.
    pub noise_var: [f64; 2],
    pub noise_p: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotation_max_deg: 30.0,
            rotation_p: 0.5,
            vertical_flip_p: 0.5,
            horizontal_flip_p: 0.5,
            random_rot90_p: 0.5,
            transpose_p: 0.5,
            elastic_alpha: 40.0,
            elastic_sigma: 6.0,
            elastic_p: 0.3,
            noise_var: [10.0, 50.0],
            noise_p: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Rotation,
    VerticalFlip,
    HorizontalFlip,
    RandomRot90,
    Transpose,
    Elastic,
    GaussianNoise,
}

impl Transform {
    pub const ALL: [Transform; 7] = [
        Transform::Rotation,
        Transform::VerticalFlip,
        Transform::HorizontalFlip,
        Transform::RandomRot90,
        Transform::Transpose,
        Transform::Elastic,
        Transform::GaussianNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::Rotation => "rotation",
            Transform::VerticalFlip => "vertical_flip",
            Transform::HorizontalFlip => "horizontal_flip",
            Transform::RandomRot90 => "random_rot90",
            Transform::Transpose => "transpose",
            Transform::Elastic => "elastic",
            Transform::GaussianNoise => "gaussian_noise",
        }
    }
}

impl AugmentationConfig {
    /// Every probability zero.
    pub fn identity() -> Self {
        Self {
            rotation_p: 0.0,
            vertical_flip_p: 0.0,
            horizontal_flip_p: 0.0,
            random_rot90_p: 0.0,
            transpose_p: 0.0,
            elastic_p: 0.0,
            noise_p: 0.0,
            ..Self::default()
        }
    }

    /// Only `t`, always applied.
    pub fn only(t: Transform) -> Self {
        let mut c = Self::identity();
        *c.probability_mut(t) = 1.0;
        c
    }

    /// Elastic transform disabled, for the with/without ablation.
    pub fn without_elastic(mut self) -> Self {
        self.elastic_p = 0.0;
        self
    }

    pub fn probability(&self, t: Transform) -> f64 {
        match t {
            Transform::Rotation => self.rotation_p,
            Transform::VerticalFlip => self.vertical_flip_p,
            Transform::HorizontalFlip => self.horizontal_flip_p,
            Transform::RandomRot90 => self.random_rot90_p,
            Transform::Transpose => self.transpose_p,
            Transform::Elastic => self.elastic_p,
            Transform::GaussianNoise => self.noise_p,
        }
    }

    pub fn probability_mut(&mut self, t: Transform) -> &mut f64 {
        match t {
            Transform::Rotation => &mut self.rotation_p,
            Transform::VerticalFlip => &mut self.vertical_flip_p,
            Transform::HorizontalFlip => &mut self.horizontal_flip_p,
            Transform::RandomRot90 => &mut self.random_rot90_p,
            Transform::Transpose => &mut self.transpose_p,
            Transform::Elastic => &mut self.elastic_p,
            Transform::GaussianNoise => &mut self.noise_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in Transform::ALL {
            let p = self.probability(t);
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{} probability {p} outside [0, 1]", t.name()));
            }
        }
        if !(self.elastic_alpha > 0.0 && self.elastic_sigma > 0.0) {
            return Err(invalid!("elastic alpha and sigma must be positive"));
        }
        let [lo, hi] = self.noise_var;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(invalid!("noise variance range must satisfy 0 <= lo <= hi, got {:?}", self.noise_var));
        }
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg.is_finite()) {
            return Err(invalid!("rotation_max_deg must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Applies the configured transforms; deterministic in `(config.seed, draw_seed)`.
pub fn apply(
    image: &RasterImage,
    mask: &LabelMask,
    config: &AugmentationConfig,
    draw_seed: u64,
) -> Result<(RasterImage, LabelMask)> {
    apply_logged(image, mask, config, draw_seed).map(|(i, m, _)| (i, m))
}

/// Like [`apply`], also returning which transforms fired.
pub fn apply_logged(
    image: &RasterImage,
    mask: &LabelMask,
    config: &AugmentationConfig,
    draw_seed: u64,
) -> Result<(RasterImage, LabelMask, Vec<Transform>)> {
    config.validate()?;
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(invalid!(
            "image is {}x{} but mask is {}x{}",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(config.seed, draw_seed));
    let mut img = image.clone();
    let mut m = mask.clone();
    let mut fired = Vec::new();

    // decisions and parameters are always drawn, so the stream layout is fixed
    let mut fire = |rng: &mut ChaCha8Rng, t: Transform| {
        let hit = rng.random_range(0.0..1.0) < config.probability(t);
        if hit {
            fired.push(t);
        }
        hit
    };

    let angle = rng.random_range(-1.0..=1.0) * config.rotation_max_deg;
    if fire(&mut rng, Transform::Rotation) {
        (img, m) = rotate(&img, &m, angle);
    }
    if fire(&mut rng, Transform::VerticalFlip) {
        (img, m) = (vflip(&img), vflip_mask(&m));
    }
    if fire(&mut rng, Transform::HorizontalFlip) {
        (img, m) = (hflip(&img), hflip_mask(&m));
    }
    let k = rng.random_range(1..=3u32);
    if fire(&mut rng, Transform::RandomRot90) {
        for _ in 0..k {
            (img, m) = (rot90(&img), rot90_mask(&m));
        }
    }
    if fire(&mut rng, Transform::Transpose) {
        (img, m) = (transpose(&img), transpose_mask(&m));
    }
    let elastic_seed: u64 = rng.random();
    if fire(&mut rng, Transform::Elastic) {
        let field = DisplacementField::random(
            img.width(),
            img.height(),
            config.elastic_alpha,
            config.elastic_sigma,
            elastic_seed,
        );
        (img, m) = (field.warp_image(&img), field.warp_mask(&m));
    }
    let var = rng.random_range(config.noise_var[0]..=config.noise_var[1]);
    let noise_seed: u64 = rng.random();
    if fire(&mut rng, Transform::GaussianNoise) {
        img = add_gaussian_noise(&img, var, noise_seed);
    }
    Ok((img, m, fired))
}

fn remap<T: Copy>(w: usize, h: usize, ow: usize, oh: usize, src: &[T], ch: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(ow * oh * ch);
    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = f(x, y);
            debug_assert!(sx < w && sy < h);
            let i = (sy * w + sx) * ch;
            out.extend_from_slice(&src[i..i + ch]);
        }
    }
    out
}

pub fn hflip(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    RasterImage::new(w, h, remap(w, h, w, h, img.data(), 3, |x, y| (w - 1 - x, y))).unwrap()
}

pub fn hflip_mask(m: &LabelMask) -> LabelMask {
    let (w, h) = (m.width(), m.height());
    LabelMask::new(w, h, remap(w, h, w, h, m.data(), 1, |x, y| (w - 1 - x, y))).unwrap()
}

pub fn vflip(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    RasterImage::new(w, h, remap(w, h, w, h, img.data(), 3, |x, y| (x, h - 1 - y))).unwrap()
}

pub fn vflip_mask(m: &LabelMask) -> LabelMask {
    let (w, h) = (m.width(), m.height());
    LabelMask::new(w, h, remap(w, h, w, h, m.data(), 1, |x, y| (x, h - 1 - y))).unwrap()
}

/// Swaps rows and columns; output is `h x w`.
pub fn transpose(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    RasterImage::new(h, w, remap(w, h, h, w, img.data(), 3, |x, y| (y, x))).unwrap()
}

pub fn transpose_mask(m: &LabelMask) -> LabelMask {
    let (w, h) = (m.width(), m.height());
    LabelMask::new(h, w, remap(w, h, h, w, m.data(), 1, |x, y| (y, x))).unwrap()
}

/// 90 degrees counter-clockwise.
pub fn rot90(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    RasterImage::new(h, w, remap(w, h, h, w, img.data(), 3, |x, y| (w - 1 - y, x))).unwrap()
}

pub fn rot90_mask(m: &LabelMask) -> LabelMask {
    let (w, h) = (m.width(), m.height());
    LabelMask::new(h, w, remap(w, h, h, w, m.data(), 1, |x, y| (w - 1 - y, x))).unwrap()
}

/// Reflect-101 index folding (`-1 -> 1`, `n -> n-2`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

fn sample_bilinear(img: &RasterImage, x: f64, y: f64) -> [u8; 3] {
    let (w, h) = (img.width(), img.height());
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let xs = [reflect(x0, w), reflect(x0 + 1, w)];
    let ys = [reflect(y0, h), reflect(y0 + 1, h)];
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let p = |xi: usize, yi: usize| img.data()[(ys[yi] * w + xs[xi]) * 3 + c] as f64;
        let top = p(0, 0) * (1.0 - fx) + p(1, 0) * fx;
        let bottom = p(0, 1) * (1.0 - fx) + p(1, 1) * fx;
        *o = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Rotation about the image centre. Image borders reflect; mask borders fill with background.
pub fn rotate(img: &RasterImage, mask: &LabelMask, angle_deg: f64) -> (RasterImage, LabelMask) {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut out = img.clone();
    let mut out_m = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse map: rotate output coords by -angle
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            out.set_pixel(x, y, sample_bilinear(img, sx, sy));
            let (nx, ny) = (sx.round(), sy.round());
            let v = if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                mask.get(nx as usize, ny as usize)
            } else {
                0
            };
            out_m.set(x, y, v);
        }
    }
    (out, out_m)
}

/// Smoothed random per-pixel displacement field.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl DisplacementField {
    pub fn random(width: usize, height: usize, alpha: f64, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = width * height;
        let noise = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| StandardNormal.sample(rng)).collect()
        };
        let raw_x = noise(&mut rng);
        let raw_y = noise(&mut rng);
        let dx = gaussian_blur(&raw_x, width, height, sigma).into_iter().map(|v| v * alpha).collect();
        let dy = gaussian_blur(&raw_y, width, height, sigma).into_iter().map(|v| v * alpha).collect();
        Self { width, height, dx, dy }
    }

    pub fn max_displacement(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0, f64::max)
    }

    pub fn warp_image(&self, img: &RasterImage) -> RasterImage {
        let mut out = img.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let i = y * self.width + x;
                out.set_pixel(x, y, sample_bilinear(img, x as f64 + self.dx[i], y as f64 + self.dy[i]));
            }
        }
        out
    }

    pub fn warp_mask(&self, m: &LabelMask) -> LabelMask {
        let mut out = m.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let i = y * self.width + x;
                let sx = reflect((x as f64 + self.dx[i]).round() as i64, self.width);
                let sy = reflect((y as f64 + self.dy[i]).round() as i64, self.height);
                out.set(x, y, m.get(sx, sy));
            }
        }
        out
    }
}

/// Separable Gaussian blur with reflect-101 borders, kernel radius `ceil(3 sigma)`.
pub fn gaussian_blur(src: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let sx = reflect(x as i64 + k as i64 - radius, width);
                acc += kv * src[y * width + sx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let sy = reflect(y as i64 + k as i64 - radius, height);
                acc += kv * tmp[sy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

pub fn add_gaussian_noise(img: &RasterImage, variance: f64, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, variance.sqrt()).expect("variance is non-negative");
    let data = img
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut out = RasterImage::new(img.width(), img.height(), data).unwrap();
    out.resolution_microns_per_pixel = img.resolution_microns_per_pixel;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreviewMode {
    /// Variant `i` uses draw seed `i` with the configured probabilities.
    Random,
    /// Variant `i` forces transform `i mod 7` and disables the rest.
    EachTransform,
}

/// Colours for the mask montage: background black, SNr red, SNCD green.
fn mask_colour(c: u8) -> [u8; 3] {
    match c {
        0 => [0, 0, 0],
        1 => [220, 30, 30],
        2 => [30, 200, 60],
        _ => [230, 230, 230],
    }
}

pub fn colourise_mask(m: &LabelMask) -> RasterImage {
    let data = m.data().iter().flat_map(|&c| mask_colour(c)).collect();
    RasterImage::new(m.width(), m.height(), data).unwrap()
}

/// Tiles images into a near-square grid padded with white.
pub fn montage(tiles: &[RasterImage]) -> RasterImage {
    assert!(!tiles.is_empty());
    let cols = (tiles.len() as f64).sqrt().ceil() as usize;
    let rows = tiles.len().div_ceil(cols);
    let tw = tiles.iter().map(|t| t.width()).max().unwrap();
    let th = tiles.iter().map(|t| t.height()).max().unwrap();
    let mut out = RasterImage::filled(cols * tw, rows * th, [255, 255, 255]);
    for (i, t) in tiles.iter().enumerate() {
        let (ox, oy) = ((i % cols) * tw, (i / cols) * th);
        for y in 0..t.height() {
            for x in 0..t.width() {
                out.set_pixel(ox + x, oy + y, t.pixel(x, y));
            }
        }
    }
    out
}

/// Writes `n` augmented variants plus `montage.png` and `mask_montage.png`.
/// Returns the variant file names.
pub fn preview(
    image: &RasterImage,
    mask: &LabelMask,
    config: &AugmentationConfig,
    n: usize,
    mode: PreviewMode,
    out_dir: &Path,
) -> Result<Vec<String>> {
    if n == 0 {
        return Err(invalid!("preview needs n >= 1"));
    }
    config.validate()?;
    io::ensure_dir(out_dir)?;
    let mut names = Vec::with_capacity(n);
    let mut tiles = Vec::with_capacity(n);
    let mut mask_tiles = Vec::with_capacity(n);
    for i in 0..n {
        let (cfg, name) = match mode {
            PreviewMode::Random => (config.clone(), format!("variant_{i:02}.png")),
            PreviewMode::EachTransform => {
                let t = Transform::ALL[i % Transform::ALL.len()];
                let mut c = AugmentationConfig::only(t);
                c.seed = config.seed;
                c.rotation_max_deg = config.rotation_max_deg;
                c.elastic_alpha = config.elastic_alpha;
                c.elastic_sigma = config.elastic_sigma;
                c.noise_var = config.noise_var;
                (c, format!("{i:02}_{}.png", t.name()))
            }
        };
        let (img, m) = apply(image, mask, &cfg, i as u64)?;
        io::write_image(&out_dir.join(&name), &img)?;
        mask_tiles.push(colourise_mask(&m));
        tiles.push(img);
        names.push(name);
    }
    io::write_image(&out_dir.join("montage.png"), &montage(&tiles))?;
    io::write_image(&out_dir.join("mask_montage.png"), &montage(&mask_tiles))?;
    Ok(names)
}
