//! Confusion counts and the overlap metrics derived from them, plus the
//! segmentation losses in [`loss`].

pub mod loss;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{ClassCatalog, ClassCounts, ConfusionCounts, LabelMask};

pub use loss::{cross_entropy, dice_loss, jaccard_loss, one_hot_tensor, soft_dice_per_class, LossKind, DEFAULT_SMOOTH};

/// One-vs-rest tallies for every catalog class.
pub fn confusion(pred: &LabelMask, truth: &LabelMask, catalog: &ClassCatalog) -> Result<ConfusionCounts> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(invalid!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        ));
    }
    pred.validate(catalog)?;
    truth.validate(catalog)?;
    let c = catalog.len();
    // joint histogram, then marginals
    let mut joint = vec![0u64; c * c];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        joint[p as usize * c + t as usize] += 1;
    }
    let total = pred.len() as u64;
    let per_class = (0..c)
        .map(|k| {
            let tp = joint[k * c + k];
            let pred_k: u64 = (0..c).map(|t| joint[k * c + t]).sum();
            let truth_k: u64 = (0..c).map(|p| joint[p * c + k]).sum();
            let fp = pred_k - tp;
            let fn_ = truth_k - tp;
            ClassCounts { tp, fp, fn_, tn: total - tp - fp - fn_ }
        })
        .collect();
    Ok(ConfusionCounts { per_class })
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// `TP / (TP + FP)`; `None` when nothing was predicted.
pub fn precision(c: &ClassCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fp)
}

/// `TP / (TP + FN)`; `None` when the class is absent from the ground truth.
pub fn recall(c: &ClassCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fn_)
}

/// `2TP / (2TP + FP + FN)`.
pub fn dice_coefficient(c: &ClassCounts) -> Option<f64> {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// `TP / (TP + FP + FN)`.
pub fn iou(c: &ClassCounts) -> Option<f64> {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u8,
    pub name: String,
    pub counts: ClassCounts,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl ClassMetrics {
    fn from_counts(class_id: u8, name: &str, counts: ClassCounts) -> Self {
        Self {
            class_id,
            name: name.to_string(),
            iou: iou(&counts),
            dice: dice_coefficient(&counts),
            precision: precision(&counts),
            recall: recall(&counts),
            counts,
        }
    }
}

/// Means of the four metrics. A `None` mean had no defined values to average.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Number of undefined values excluded from each mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UndefinedCounts {
    pub iou: usize,
    pub dice: usize,
    pub precision: usize,
    pub recall: usize,
}

#[derive(Debug, Clone, Copy)]
enum Metric {
    Iou,
    Dice,
    Precision,
    Recall,
}

impl Metric {
    const ALL: [Metric; 4] = [Metric::Iou, Metric::Dice, Metric::Precision, Metric::Recall];

    fn of_class(self, m: &ClassMetrics) -> Option<f64> {
        match self {
            Metric::Iou => m.iou,
            Metric::Dice => m.dice,
            Metric::Precision => m.precision,
            Metric::Recall => m.recall,
        }
    }

    fn of_mean(self, m: &MeanMetrics) -> Option<f64> {
        match self {
            Metric::Iou => m.iou,
            Metric::Dice => m.dice,
            Metric::Precision => m.precision,
            Metric::Recall => m.recall,
        }
    }
}

/// Mean of defined values plus the number skipped.
fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), skipped)
}

fn means(mut get: impl FnMut(Metric) -> (Option<f64>, usize)) -> (MeanMetrics, UndefinedCounts) {
    let mut m = MeanMetrics::default();
    let mut u = UndefinedCounts::default();
    for metric in Metric::ALL {
        let (v, skipped) = get(metric);
        match metric {
            Metric::Iou => (m.iou, u.iou) = (v, skipped),
            Metric::Dice => (m.dice, u.dice) = (v, skipped),
            Metric::Precision => (m.precision, u.precision) = (v, skipped),
            Metric::Recall => (m.recall, u.recall) = (v, skipped),
        }
    }
    (m, u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
    pub mean_over: Vec<u8>,
    pub mean: MeanMetrics,
    pub undefined: UndefinedCounts,
}

impl MetricReport {
    pub fn class(&self, id: u8) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.class_id == id)
    }

    pub fn confusion(&self) -> ConfusionCounts {
        ConfusionCounts { per_class: self.classes.iter().map(|c| c.counts).collect() }
    }

    /// One row per class plus a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            crate::io::ensure_dir(p)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["class", "iou", "dice", "precision", "recall", "tp", "fp", "fn", "tn"])?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        for c in &self.classes {
            w.write_record([
                c.name.clone(),
                f(c.iou),
                f(c.dice),
                f(c.precision),
                f(c.recall),
                c.counts.tp.to_string(),
                c.counts.fp.to_string(),
                c.counts.fn_.to_string(),
                c.counts.tn.to_string(),
            ])?;
        }
        w.write_record([
            "mean".to_string(),
            f(self.mean.iou),
            f(self.mean.dice),
            f(self.mean.precision),
            f(self.mean.recall),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
        w.flush().map_err(|e| crate::Error::io(path, e))?;
        Ok(())
    }
}

/// Per-class metrics plus their mean over `mean_over` (foreground classes when `None`).
pub fn evaluate(
    pred: &LabelMask,
    truth: &LabelMask,
    catalog: &ClassCatalog,
    mean_over: Option<&[u8]>,
) -> Result<MetricReport> {
    let counts = confusion(pred, truth, catalog)?;
    report_from_counts(&counts, catalog, mean_over)
}

pub fn report_from_counts(
    counts: &ConfusionCounts,
    catalog: &ClassCatalog,
    mean_over: Option<&[u8]>,
) -> Result<MetricReport> {
    let mean_over = match mean_over {
        Some(ids) => ids.to_vec(),
        None => catalog.foreground(),
    };
    if let Some(bad) = mean_over.iter().find(|&&id| !catalog.contains(id)) {
        return Err(invalid!("mean_over names class {bad}, which is not in the catalog"));
    }
    let classes: Vec<ClassMetrics> = counts
        .per_class
        .iter()
        .enumerate()
        .map(|(id, c)| ClassMetrics::from_counts(id as u8, catalog.name(id as u8).unwrap_or("?"), *c))
        .collect();
    let (mean, undefined) = means(|metric| {
        mean_defined(mean_over.iter().map(|&id| metric.of_class(&classes[id as usize])))
    });
    Ok(MetricReport { classes, mean_over, mean, undefined })
}

/// Mean over images of each image's class-mean metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub n_images: usize,
    pub mean_over: Vec<u8>,
    pub mean: MeanMetrics,
    /// Images whose class-mean was undefined and therefore skipped.
    pub skipped_images: UndefinedCounts,
    pub per_image: Vec<(String, MetricReport)>,
}

pub fn aggregate(per_image: Vec<(String, MetricReport)>) -> DatasetMetrics {
    let mean_over = per_image.first().map(|(_, r)| r.mean_over.clone()).unwrap_or_default();
    let (mean, skipped_images) =
        means(|metric| mean_defined(per_image.iter().map(|(_, r)| metric.of_mean(&r.mean))));
    DatasetMetrics { n_images: per_image.len(), mean_over, mean, skipped_images, per_image }
}

impl DatasetMetrics {
    /// Columns: sample_id, iou, dice, precision, recall (per-image class means), then a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            crate::io::ensure_dir(p)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "iou", "dice", "precision", "recall"])?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        let row = |w: &mut csv::Writer<std::fs::File>, id: &str, m: &MeanMetrics| {
            w.write_record([id.to_string(), f(m.iou), f(m.dice), f(m.precision), f(m.recall)])
        };
        for (id, r) in &self.per_image {
            row(&mut w, id, &r.mean)?;
        }
        row(&mut w, "mean", &self.mean)?;
        w.flush().map_err(|e| crate::Error::io(path, e))?;
        Ok(())
    }
}
