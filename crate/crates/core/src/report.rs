//! Manual-vs-model comparison of quantified optical density and the result
//! bundle (metrics table, scatter data, summary JSON).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io;
use crate::lossmetrics::{DatasetMetrics, MeanMetrics};
use crate::quantify::{MaskSource, OdRow};

pub const REPORT_SCHEMA: &str = "nigra-report/v1";
const ABSENT: &str = "absent";
const UNDEFINED: &str = "undefined";

/// Published test-set means and OD correlations. They come from an internal
/// mouse dataset and cannot be reproduced here; reports carry them as labels.
pub mod reference {
    pub const IOU_WITH_ET: f64 = 0.79;
    pub const DICE_WITH_ET: f64 = 0.87;
    pub const RECALL_WITH_ET: f64 = 0.88;
    pub const PRECISION_WITH_ET: f64 = 0.86;
    pub const IOU_WITHOUT_ET: f64 = 0.78;
    pub const DICE_WITHOUT_ET: f64 = 0.86;
    pub const RECALL_WITHOUT_ET: f64 = 0.87;
    pub const PRECISION_WITHOUT_ET: f64 = 0.85;
    pub const R_SQUARED_SNR: f64 = 0.8678;
    pub const R_SQUARED_SNCD: f64 = 0.7928;
    pub const P_VALUE_BOUND: f64 = 1e-4;
    pub const NOTE: &str = "published values from an internal mouse dataset; \
        not reproducible on synthetic phantoms and shown for orientation only";
}

/// Manual (`x`) against model (`y`) values with one label per pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSeries {
    pub labels: Vec<String>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl PairedSeries {
    pub fn new(labels: Vec<String>, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let s = Self { labels, x, y };
        s.validate()?;
        Ok(s)
    }

    /// Unlabelled series; labels are the pair indices.
    pub fn from_xy(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let labels = (0..x.len()).map(|i| i.to_string()).collect();
        Self::new(labels, x, y)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.len() != self.y.len() || self.labels.len() != self.x.len() {
            return Err(invalid!(
                "paired series lengths differ: {} labels, {} x, {} y",
                self.labels.len(),
                self.x.len(),
                self.y.len()
            ));
        }
        if self.x.len() < 3 {
            return Err(invalid!("correlation needs at least 3 pairs, got {}", self.x.len()));
        }
        for (i, (a, b)) in self.x.iter().zip(&self.y).enumerate() {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::NonFinite(format!("pair {} ({}): x = {a}, y = {b}", i, self.labels[i])));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub n: usize,
    pub pearson_r: f64,
    pub r_squared: f64,
    /// Infinite when |r| = 1.
    #[serde(with = "signed_inf")]
    pub t_statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub slope: f64,
    pub intercept: f64,
}

impl CorrelationResult {
    pub fn fit(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// JSON has no infinities; they round-trip as the strings "inf" and "-inf".
mod signed_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => s.serialize_str("inf"),
            f64::NEG_INFINITY => s.serialize_str("-inf"),
            v => s.serialize_f64(v),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number, got {t:?}"))),
        }
    }
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    statrs::function::beta::beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Pearson correlation with a t-test on r and the least-squares line.
pub fn correlate(series: &PairedSeries) -> Result<CorrelationResult> {
    series.validate()?;
    let n = series.len();
    let nf = n as f64;
    let mx = series.x.iter().sum::<f64>() / nf;
    let my = series.y.iter().sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in series.x.iter().zip(&series.y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 {
        return Err(Error::Degenerate("x (manual) series is constant; correlation undefined".into()));
    }
    if syy == 0.0 {
        return Err(Error::Degenerate("y (model) series is constant; correlation undefined".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let r2 = r * r;
    let df = nf - 2.0;
    let t = if r2 >= 1.0 { f64::INFINITY.copysign(r) } else { r * (df / (1.0 - r2)).sqrt() };
    let slope = sxy / sxx;
    Ok(CorrelationResult {
        n,
        pearson_r: r,
        r_squared: r2,
        t_statistic: t,
        p_value: t_two_sided_p(t, df),
        slope,
        intercept: my - slope * mx,
    })
}

/// Pairs ground-truth and model OD rows on (sample, region). `region = None`
/// pools every region. Pairs with an empty region on either side are dropped.
pub fn paired_od(rows: &[OdRow], region: Option<&str>) -> (Vec<String>, Vec<f64>, Vec<f64>) {
    let mut gt = BTreeMap::new();
    let mut model = BTreeMap::new();
    for r in rows.iter().filter(|r| region.is_none_or(|g| r.region == g)) {
        let key = (r.sample_id.clone(), r.region.clone());
        match r.mask_source {
            MaskSource::Gt => gt.insert(key, r.normalized_od),
            MaskSource::Model => model.insert(key, r.normalized_od),
        };
    }
    let (mut labels, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (key, g) in &gt {
        if let (Some(g), Some(Some(m))) = (g, model.get(key)) {
            labels.push(format!("{}/{}", key.0, key.1));
            x.push(*g);
            y.push(*m);
        }
    }
    (labels, x, y)
}

/// Mean metrics for one evaluated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_images: usize,
    pub mean: MeanMetrics,
}

impl From<&DatasetMetrics> for RunSummary {
    fn from(d: &DatasetMetrics) -> Self {
        Self { n_images: d.n_images, mean: d.mean }
    }
}

/// One correlation scope: a region name or `pooled`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub scope: String,
    pub n_pairs: usize,
    pub result: Option<CorrelationResult>,
    pub error: Option<String>,
    /// Published R² for this region, if any.
    pub reference_r_squared: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBlock {
    pub note: String,
    pub with_et: MeanMetrics,
    pub without_et: MeanMetrics,
    pub r_squared: BTreeMap<String, f64>,
    pub p_value_bound: f64,
}

impl Default for ReferenceBlock {
    fn default() -> Self {
        use reference::*;
        Self {
            note: NOTE.into(),
            with_et: MeanMetrics {
                iou: Some(IOU_WITH_ET),
                dice: Some(DICE_WITH_ET),
                precision: Some(PRECISION_WITH_ET),
                recall: Some(RECALL_WITH_ET),
            },
            without_et: MeanMetrics {
                iou: Some(IOU_WITHOUT_ET),
                dice: Some(DICE_WITHOUT_ET),
                precision: Some(PRECISION_WITHOUT_ET),
                recall: Some(RECALL_WITHOUT_ET),
            },
            r_squared: BTreeMap::from([("SNCD".into(), R_SQUARED_SNCD), ("SNr".into(), R_SQUARED_SNR)]),
            p_value_bound: P_VALUE_BOUND,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub with_et: Option<RunSummary>,
    pub without_et: Option<RunSummary>,
    pub correlations: Vec<CorrelationEntry>,
    pub reference: ReferenceBlock,
    pub missing: Vec<String>,
    pub files: Vec<String>,
}

impl Report {
    pub fn correlation(&self, scope: &str) -> Option<&CorrelationEntry> {
        self.correlations.iter().find(|c| c.scope == scope)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub with_et: Option<DatasetMetrics>,
    pub without_et: Option<DatasetMetrics>,
    pub od_rows: Option<Vec<OdRow>>,
}

/// Writes `report.json`, `metrics_table.csv` and one `correlation_<scope>.csv`
/// per region plus the pooled scope. Missing inputs are listed and the rest is
/// still written; an entirely empty input is rejected.
pub fn build_report(inputs: &ReportInputs, out_dir: &Path) -> Result<Report> {
    if inputs.with_et.is_none() && inputs.without_et.is_none() && inputs.od_rows.is_none() {
        return Err(invalid!("report needs at least one metrics run or OD table"));
    }
    io::ensure_dir(out_dir)?;
    let mut missing = Vec::new();
    if inputs.with_et.is_none() {
        missing.push("metrics.with_et".to_string());
    }
    if inputs.without_et.is_none() {
        missing.push("metrics.without_et".to_string());
    }
    let reference = ReferenceBlock::default();
    let with_et = inputs.with_et.as_ref().map(RunSummary::from);
    let without_et = inputs.without_et.as_ref().map(RunSummary::from);
    let mut files = vec!["metrics_table.csv".to_string()];
    write_metrics_table(&out_dir.join("metrics_table.csv"), with_et, without_et, &reference)?;

    let mut correlations = Vec::new();
    match &inputs.od_rows {
        None => missing.push("od_rows".into()),
        Some(rows) => {
            let (entries, written) = write_correlations(rows, out_dir)?;
            for e in &entries {
                if let Some(err) = &e.error {
                    missing.push(format!("correlation.{}: {err}", e.scope));
                }
            }
            correlations = entries;
            files.extend(written);
        }
    }
    files.push("report.json".into());
    let report = Report {
        schema: REPORT_SCHEMA.into(),
        with_et,
        without_et,
        correlations,
        reference,
        missing,
        files,
    };
    io::write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Correlates manual and model OD per region (sorted by name) and pooled,
/// writing `correlation_<scope>.csv` for every scope that could be computed.
/// Returns the entries and the written file names.
pub fn write_correlations(rows: &[OdRow], out_dir: &Path) -> Result<(Vec<CorrelationEntry>, Vec<String>)> {
    io::ensure_dir(out_dir)?;
    let reference = ReferenceBlock::default();
    let regions: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.region.as_str()).collect();
    let mut entries = Vec::new();
    let mut files = Vec::new();
    for region in regions.into_iter().map(Some).chain([None]) {
        let scope = region.unwrap_or("pooled").to_string();
        let (labels, x, y) = paired_od(rows, region);
        let n_pairs = labels.len();
        let outcome = PairedSeries::new(labels, x, y).and_then(|s| correlate(&s).map(|c| (s, c)));
        let (result, error) = match outcome {
            Ok((s, c)) => {
                let name = format!("correlation_{}.csv", file_stem(&scope));
                write_scatter(&out_dir.join(&name), &s, &c)?;
                files.push(name);
                (Some(c), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        entries.push(CorrelationEntry {
            reference_r_squared: reference.r_squared.get(&scope).copied(),
            scope,
            n_pairs,
            result,
            error,
        });
    }
    Ok((entries, files))
}

fn file_stem(scope: &str) -> String {
    scope.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| UNDEFINED.into())
}

fn write_metrics_table(
    path: &Path,
    with_et: Option<RunSummary>,
    without_et: Option<RunSummary>,
    reference: &ReferenceBlock,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "with_et", "without_et", "reference_with_et", "reference_without_et"])?;
    let pick: [(&str, fn(&MeanMetrics) -> Option<f64>); 4] = [
        ("iou", |m| m.iou),
        ("dice", |m| m.dice),
        ("recall", |m| m.recall),
        ("precision", |m| m.precision),
    ];
    for (name, f) in pick {
        let col = |r: Option<RunSummary>| r.map(|r| fmt_opt(f(&r.mean))).unwrap_or_else(|| ABSENT.into());
        w.write_record([
            name.to_string(),
            col(with_et),
            col(without_et),
            fmt_opt(f(&reference.with_et)),
            fmt_opt(f(&reference.without_et)),
        ])?;
    }
    let n = |r: Option<RunSummary>| r.map(|r| r.n_images.to_string()).unwrap_or_else(|| ABSENT.into());
    w.write_record(["n_images".into(), n(with_et), n(without_et), String::new(), String::new()])?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_scatter(path: &Path, s: &PairedSeries, c: &CorrelationResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "x", "y", "fit"])?;
    for ((l, x), y) in s.labels.iter().zip(&s.x).zip(&s.y) {
        w.write_record([l.clone(), format!("{x:.9}"), format!("{y:.9}"), format!("{:.9}", c.fit(*x))])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Files a report in `dir` would consist of, for callers checking outputs.
pub fn report_paths(dir: &Path, report: &Report) -> Vec<PathBuf> {
    report.files.iter().map(|f| dir.join(f)).collect()
}
