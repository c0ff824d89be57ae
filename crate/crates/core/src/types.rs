//! Domain types shared by every stage of the pipeline.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Class id used for everything outside the annotated sub-regions.
pub const BACKGROUND: u8 = 0;
pub const SNR: u8 = 1;
pub const SNCD: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
}

/// Ordered list of segmentation classes. Id 0 is always background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct ClassCatalog {
    entries: Vec<ClassEntry>,
}

impl Default for ClassCatalog {
    fn default() -> Self {
        Self {
            entries: vec![
                ClassEntry { id: BACKGROUND, name: "background".into() },
                ClassEntry { id: SNR, name: "SNr".into() },
                ClassEntry { id: SNCD, name: "SNCD".into() },
            ],
        }
    }
}

impl ClassCatalog {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(invalid!("catalog needs background plus at least one foreground class"));
        }
        if entries.len() > 256 {
            return Err(invalid!("catalog has {} classes, at most 256 fit a u8 mask", entries.len()));
        }
        let mut names = HashSet::new();
        for (pos, e) in entries.iter().enumerate() {
            if e.id as usize != pos {
                return Err(invalid!(
                    "class ids must be contiguous from 0; entry {pos} has id {}",
                    e.id
                ));
            }
            if !names.insert(e.name.as_str()) {
                return Err(invalid!("duplicate class name {:?}", e.name));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: u8) -> bool {
        (id as usize) < self.entries.len()
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.entries.get(id as usize).map(|e| e.name.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.entries
            .iter()
            .find(|e| e.name.eq_ignore_ascii_case(name))
            .map(|e| e.id)
    }

    /// Every class except background, in id order.
    pub fn foreground(&self) -> Vec<u8> {
        self.entries.iter().skip(1).map(|e| e.id).collect()
    }
}

impl TryFrom<Vec<ClassEntry>> for ClassCatalog {
    type Error = crate::Error;
    fn try_from(v: Vec<ClassEntry>) -> Result<Self> {
        ClassCatalog::new(v)
    }
}

impl From<ClassCatalog> for Vec<ClassEntry> {
    fn from(c: ClassCatalog) -> Self {
        c.entries
    }
}

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
    pub resolution_microns_per_pixel: Option<f64>,
}

impl fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("resolution_microns_per_pixel", &self.resolution_microns_per_pixel)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(invalid!(
                "image data has {} samples, expected {}x{}x3 = {}",
                data.len(),
                width,
                height,
                width * height * 3
            ));
        }
        Ok(Self { width, height, data, resolution_microns_per_pixel: None })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data, resolution_microns_per_pixel: None }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }
}

/// Per-pixel class-id raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid!(
                "mask data has {} values, expected {}x{} = {}",
                data.len(),
                width,
                height,
                width * height
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Checks every value against the catalog, naming the first offender.
    pub fn validate(&self, catalog: &ClassCatalog) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|&v| !catalog.contains(v)) {
            return Err(invalid!(
                "class id {} at pixel ({}, {}) is not in the catalog (0..{})",
                self.data[pos],
                pos % self.width.max(1),
                pos / self.width.max(1),
                catalog.len()
            ));
        }
        Ok(())
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Sorted set of distinct values.
    pub fn value_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }
}

/// Per-pixel class probabilities, row-major with the class axis innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<f64>,
}

/// Tolerance for the per-pixel sum-to-one invariant.
pub const PROB_SUM_TOL: f64 = 1e-6;

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        let map = Self::new_unchecked(width, height, classes, data)?;
        map.validate()?;
        Ok(map)
    }

    /// Builds without checking normalisation; shape is still checked.
    pub fn new_unchecked(
        width: usize,
        height: usize,
        classes: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(invalid!("probability map needs at least one class"));
        }
        if data.len() != width * height * classes {
            return Err(invalid!(
                "probability data has {} values, expected {}x{}x{}",
                data.len(),
                width,
                height,
                classes
            ));
        }
        Ok(Self { width, height, classes, data })
    }

    pub fn validate(&self) -> Result<()> {
        for (p, v) in self.data.chunks_exact(self.classes).enumerate() {
            if v.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) {
                return Err(invalid!("pixel {p} has a probability outside [0, 1]"));
            }
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(invalid!("pixel {p} probabilities sum to {s}"));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.classes..(index + 1) * self.classes]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// One-vs-rest pixel tallies, indexed by class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn class(&self, id: u8) -> Option<&ClassCounts> {
        self.per_class.get(id as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Blind,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Blind => "blind",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "blind" => Ok(Split::Blind),
            other => Err(invalid!("unknown split {other:?} (train|val|test|blind)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSample {
    pub image_path: String,
    pub mask_path: String,
    pub sample_id: String,
    pub split: Split,
}

/// Expands a mask into one-hot probability vectors.
pub fn one_hot(mask: &LabelMask, catalog: &ClassCatalog) -> Result<ProbabilityMap> {
    mask.validate(catalog)?;
    let c = catalog.len();
    let mut data = vec![0.0; mask.len() * c];
    for (i, &v) in mask.data().iter().enumerate() {
        data[i * c + v as usize] = 1.0;
    }
    ProbabilityMap::new_unchecked(mask.width(), mask.height(), c, data)
}

/// Most probable class per pixel; ties go to the lowest class id.
pub fn argmax_decode(probs: &ProbabilityMap) -> LabelMask {
    let data = probs.pixels().map(argmax_lowest).collect();
    LabelMask { width: probs.width(), height: probs.height(), data }
}

pub(crate) fn argmax_lowest(v: &[f64]) -> u8 {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = i;
        }
    }
    best as u8
}
