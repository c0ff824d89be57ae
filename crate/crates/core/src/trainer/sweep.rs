//! One training run per (backbone, image size) cell, ranked by best
//! validation mean IoU.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_split, train, TrainConfig, TrainInputs};
use crate::augment::AugmentationConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{BackboneName, BackboneSpec, SegModel, SegModelConfig};
use crate::types::{ClassCatalog, Split};

/// Best IoU the original model-selection experiment reported (EfficientNet
/// backbone, full-size sections). Not reproducible on phantoms.
pub const REFERENCE_BEST_IOU: f64 = 0.73;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub backbone: BackboneName,
    pub image_size: usize,
    pub best_val_miou: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub epochs_run: usize,
    pub parameters: Option<usize>,
    pub error: Option<String>,
    /// 1-based rank by IoU; failed cells are unranked.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub reference_best_iou: f64,
    pub reference_note: String,
}

impl SweepReport {
    /// Cells sorted by rank, failures last in input order.
    pub fn ranking(&self) -> Vec<&SweepCell> {
        let mut v: Vec<&SweepCell> = self.cells.iter().collect();
        v.sort_by_key(|c| c.rank.unwrap_or(usize::MAX));
        v
    }

    /// Bar-chart data: one row per cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            io::ensure_dir(p)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["rank", "backbone", "image_size", "best_val_miou", "best_val_loss", "epochs_run", "error"])?;
        for c in self.ranking() {
            w.write_record([
                c.rank.map(|r| r.to_string()).unwrap_or_default(),
                c.backbone.to_string(),
                c.image_size.to_string(),
                c.best_val_miou.map(|v| format!("{v:.6}")).unwrap_or_default(),
                c.best_val_loss.map(|v| format!("{v:.6}")).unwrap_or_default(),
                c.epochs_run.to_string(),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Model configuration for one cell: the template with backbone and size
/// replaced. `tiny-test` cells use the tiny decoder unless the template is tiny already.
pub fn cell_config(template: &SegModelConfig, backbone: BackboneName, image_size: usize) -> SegModelConfig {
    let mut cfg = template.clone();
    if backbone != template.backbone.name {
        cfg.backbone = BackboneSpec::new(backbone);
        if backbone == BackboneName::TinyTest {
            cfg.decoder_channel_widths = SegModelConfig::tiny(image_size).decoder_channel_widths;
        }
    }
    cfg.input_size = image_size;
    cfg
}

pub struct SweepPlan<'a> {
    pub manifest: &'a Path,
    pub backbones: &'a [BackboneName],
    pub image_sizes: &'a [usize],
    pub template: &'a SegModelConfig,
    pub train: &'a TrainConfig,
    pub augmentation: &'a AugmentationConfig,
    pub catalog: &'a ClassCatalog,
}

/// Runs every cell sequentially. A failing cell is recorded and the sweep
/// continues. Writes `sweep.json` and `sweep.csv` when `out_dir` is given;
/// per-cell training output goes to `out_dir/<backbone>_<size>/`.
pub fn run_backbone_sweep(plan: &SweepPlan, out_dir: Option<&Path>) -> Result<SweepReport> {
    let mut cells = Vec::new();
    for &size in plan.image_sizes {
        let data = load_split(plan.manifest, Split::Train, size, plan.catalog)
            .and_then(|t| Ok((t, load_split(plan.manifest, Split::Val, size, plan.catalog)?)));
        for &backbone in plan.backbones {
            let mut cell = SweepCell {
                backbone,
                image_size: size,
                best_val_miou: None,
                best_val_loss: None,
                epochs_run: 0,
                parameters: None,
                error: None,
                rank: None,
            };
            let outcome = data.as_ref().map_err(|e| e.to_string()).and_then(|(tr, va)| {
                let cfg = cell_config(plan.template, backbone, size);
                let model = SegModel::build(&cfg, plan.train.seed).map_err(|e| e.to_string())?;
                let cell_dir = out_dir.map(|d| d.join(format!("{backbone}_{size}")));
                let inputs = TrainInputs { train: tr, val: va, catalog: plan.catalog, augmentation: plan.augmentation };
                train(&model, &inputs, plan.train, cell_dir.as_deref())
                    .map(|st| (st, model.num_parameters()))
                    .map_err(|e| e.to_string())
            });
            match outcome {
                Ok((st, n)) => {
                    cell.best_val_miou = st.best_val_miou;
                    cell.best_val_loss = st.best_val_loss;
                    cell.epochs_run = st.epoch;
                    cell.parameters = Some(n);
                }
                Err(e) => {
                    log::warn!("sweep cell {backbone} @ {size} failed: {e}");
                    cell.error = Some(e);
                }
            }
            cells.push(cell);
        }
    }
    rank(&mut cells);
    let report = SweepReport {
        cells,
        reference_best_iou: REFERENCE_BEST_IOU,
        reference_note: "published best IoU (EfficientNet encoder, full-size sections); reference only".into(),
    };
    if let Some(dir) = out_dir {
        io::write_json(&dir.join("sweep.json"), &report)?;
        report.write_csv(&dir.join("sweep.csv"))?;
    }
    Ok(report)
}

/// Ties keep input order.
fn rank(cells: &mut [SweepCell]) {
    let mut idx: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].best_val_miou.is_some()).collect();
    idx.sort_by(|&a, &b| {
        let (x, y) = (cells[a].best_val_miou.unwrap(), cells[b].best_val_miou.unwrap());
        y.total_cmp(&x).then(a.cmp(&b))
    });
    for (r, i) in idx.into_iter().enumerate() {
        cells[i].rank = Some(r + 1);
    }
}
