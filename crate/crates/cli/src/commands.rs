use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nigra_core::augment::{self, AugmentationConfig};
use nigra_core::lossmetrics::DatasetMetrics;
use nigra_core::model::{load_checkpoint, SegModel};
use nigra_core::preprocess::{resize_image, resize_mask};
use nigra_core::quantify::{self, MaskSource, OdRow};
use nigra_core::report::{self, ReportInputs};
use nigra_core::trainer::{self, load_split, SweepPlan, TrainInputs};
use nigra_core::{io, synthdata, ClassCatalog, Error, LabelMask, RasterImage, Result, Split};
use serde_json::{json, Value};

use crate::config::{self, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "nigra", version, about = "Substantia nigra sub-region segmentation and TH optical-density pipeline")]
pub struct Cli {
    /// JSON configuration tree.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub set: Vec<String>,
    /// Master seed; replaces phantom.seed, train.seed and augment.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset with manifest and ground-truth OD.
    Generate(GenerateArgs),
    /// Train a segmentation model.
    Train(TrainArgs),
    /// Train one model per (backbone, image size) cell and rank them.
    Sweep(TrainArgs),
    /// Score a checkpoint on one manifest split.
    Eval(EvalArgs),
    /// Segment images with a checkpoint.
    Predict(PredictArgs),
    /// Per-region TH optical density from ground-truth and model masks.
    Quantify(QuantifyArgs),
    /// Correlate manual and model OD from a quantify table.
    Correlate(CorrelateArgs),
    /// Write augmented variants of one image/mask pair.
    PreviewAug(PreviewArgs),
    /// Assemble the metrics table, correlation data and summary JSON.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Number of phantoms (phantom.n_samples).
    #[arg(long)]
    pub n: Option<usize>,
    /// Edge length in pixels (phantom.image_size).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest (data.manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Maximum epochs (train.epochs).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest (data.manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split to score (data.split).
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of PNG/TIFF images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantifyArgs {
    /// Dataset manifest (data.manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split to quantify (data.split).
    #[arg(long)]
    pub split: Option<String>,
    /// Also quantify inside this checkpoint's predicted masks.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// OD table holding both gt and model rows.
    #[arg(long)]
    pub od: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Number of variants (preview.n).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `metrics.json` from `eval` of the run trained with elastic transform.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// `metrics.json` of the run trained without elastic transform.
    #[arg(long)]
    pub metrics_without_et: Option<PathBuf>,
    /// OD table from `quantify` with a checkpoint.
    #[arg(long)]
    pub od: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Sweep(_) => "sweep",
            Command::Eval(_) => "eval",
            Command::Predict(_) => "predict",
            Command::Quantify(_) => "quantify",
            Command::Correlate(_) => "correlate",
            Command::PreviewAug(_) => "preview-aug",
            Command::Report(_) => "report",
        }
    }

    /// Config sections (or single keys) this subcommand reads.
    pub fn sections(name: &str) -> &'static [&'static str] {
        match name {
            "generate" => &["seed", "phantom"],
            "train" => &["seed", "data.manifest", "model", "train", "augment"],
            "sweep" => &["seed", "data.manifest", "model", "train", "augment", "sweep"],
            "eval" => &["data"],
            "predict" => &["stain"],
            "quantify" => &["data", "stain", "quantify"],
            "preview-aug" => &["seed", "augment", "preview"],
            _ => &[],
        }
    }

    fn flag_overrides(&self) -> Vec<(String, Value)> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| json!(p));
        match self {
            Command::Generate(a) => {
                put("phantom.n_samples", a.n.map(|v| json!(v)));
                put("phantom.image_size", a.size.map(|v| json!(v)));
            }
            Command::Train(a) | Command::Sweep(a) => {
                put("data.manifest", path(&a.manifest));
                put("train.epochs", a.epochs.map(|v| json!(v)));
            }
            Command::Eval(a) => {
                put("data.manifest", path(&a.manifest));
                put("data.split", a.split.as_ref().map(|v| json!(v)));
            }
            Command::Quantify(a) => {
                put("data.manifest", path(&a.manifest));
                put("data.split", a.split.as_ref().map(|v| json!(v)));
            }
            Command::PreviewAug(a) => put("preview.n", a.n.map(|v| json!(v))),
            Command::Predict(_) | Command::Correlate(_) | Command::Report(_) => {}
        }
        o
    }

    fn out_dir(&self) -> &Path {
        match self {
            Command::Generate(a) => &a.out,
            Command::Train(a) | Command::Sweep(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Predict(a) => &a.out,
            Command::Quantify(a) => &a.out,
            Command::Correlate(a) => &a.out,
            Command::PreviewAug(a) => &a.out,
            Command::Report(a) => &a.out,
        }
    }
}

/// Help footer naming every config key a subcommand reads.
pub fn keys_help(name: &str) -> String {
    let keys = config::keys(Command::sections(name));
    if keys.is_empty() {
        return "Config keys read: none".into();
    }
    format!("Config keys read (override with --set KEY=VALUE):\n  {}", keys.join("\n  "))
}

/// Applies the config file, `--seed`, `--set` and subcommand flags, in that order.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let file = cli.config.as_deref().map(config::read_config_file).transpose()?;
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        overrides.push(("seed".to_string(), json!(s)));
    }
    for s in &cli.set {
        overrides.push(config::parse_override(s)?);
    }
    overrides.extend(cli.command.flag_overrides());
    config::resolve(file, &overrides)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let cmd = &cli.command;
    let out = cmd.out_dir();
    log::info!("{} -> {}", cmd.name(), out.display());
    match cmd {
        Command::Generate(_) => generate(&cfg, out)?,
        Command::Train(_) => train(&cfg, out)?,
        Command::Sweep(_) => sweep(&cfg, out)?,
        Command::Eval(a) => eval(&cfg, &a.checkpoint, out)?,
        Command::Predict(a) => predict(&cfg, &a.checkpoint, &a.input, out)?,
        Command::Quantify(a) => quantify_cmd(&cfg, a.checkpoint.as_deref(), out)?,
        Command::Correlate(a) => correlate(&a.od, out)?,
        Command::PreviewAug(a) => preview(&cfg, &a.image, &a.mask, out)?,
        Command::Report(a) => report_cmd(a, out)?,
    }
    write_run_record(cli, &cfg, out)
}

/// `run.json`: command, crate version, resolved config subtree and seeds.
fn write_run_record(cli: &Cli, cfg: &RunConfig, out: &Path) -> Result<()> {
    let name = cli.command.name();
    let tree = serde_json::to_value(cfg)?;
    let mut sub = BTreeMap::new();
    for key in Command::sections(name) {
        let ptr = format!("/{}", key.replace('.', "/"));
        sub.insert(key.to_string(), tree.pointer(&ptr).cloned().unwrap_or(Value::Null));
    }
    let record = json!({
        "command": name,
        "version": env!("CARGO_PKG_VERSION"),
        "config": sub,
        "seeds": {"master": cfg.seed, "phantom": cfg.phantom.seed, "train": cfg.train.seed, "augment": cfg.augment.seed},
        "overrides": cli.set,
    });
    io::write_json(&out.join("run.json"), &record)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Validation(format!("{what} {} does not exist or is not a file", path.display())));
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::Validation(format!("{what} {} does not exist or is not a directory", path.display())));
    }
    Ok(())
}

fn manifest(cfg: &RunConfig) -> Result<PathBuf> {
    let m = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("data.manifest is required (--manifest)".into()))?;
    require_file(&m, "manifest")?;
    Ok(m)
}

fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.phantom.validate()?;
    let samples = synthdata::generate_dataset(&cfg.phantom, out)?;
    log::info!("wrote {} phantoms", samples.len());
    Ok(())
}

fn non_empty<T>(v: Vec<T>, split: Split, manifest: &Path) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::Config(format!("{} split of {} is empty", split.as_str(), manifest.display())));
    }
    Ok(v)
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.augment.validate()?;
    let manifest = manifest(cfg)?;
    let catalog = ClassCatalog::default();
    let size = cfg.model.input_size;
    let tr = non_empty(load_split(&manifest, Split::Train, size, &catalog)?, Split::Train, &manifest)?;
    let va = non_empty(load_split(&manifest, Split::Val, size, &catalog)?, Split::Val, &manifest)?;
    let model = SegModel::build(&cfg.model, cfg.train.seed)?;
    log::info!("{} parameters, {} train / {} val", model.num_parameters(), tr.len(), va.len());
    let inputs = TrainInputs { train: &tr, val: &va, catalog: &catalog, augmentation: &cfg.augment };
    let state = trainer::train(&model, &inputs, &cfg.train, Some(out))?;
    log::info!(
        "stopped after epoch {} ({:?}); best val loss {:?} at epoch {:?}",
        state.epoch,
        state.stop_reason,
        state.best_val_loss,
        state.best_epoch
    );
    Ok(())
}

fn sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.train.validate()?;
    cfg.augment.validate()?;
    if cfg.sweep.backbones.is_empty() || cfg.sweep.image_sizes.is_empty() {
        return Err(Error::Config("sweep.backbones and sweep.image_sizes must be non-empty".into()));
    }
    for &b in &cfg.sweep.backbones {
        for &s in &cfg.sweep.image_sizes {
            trainer::cell_config(&cfg.model, b, s).validate()?;
        }
    }
    let manifest = manifest(cfg)?;
    let catalog = ClassCatalog::default();
    let plan = SweepPlan {
        manifest: &manifest,
        backbones: &cfg.sweep.backbones,
        image_sizes: &cfg.sweep.image_sizes,
        template: &cfg.model,
        train: &cfg.train,
        augmentation: &cfg.augment,
        catalog: &catalog,
    };
    let report = trainer::run_backbone_sweep(&plan, Some(out))?;
    for c in report.ranking() {
        log::info!("{:?} {} @ {}: {:?} {}", c.rank, c.backbone, c.image_size, c.best_val_miou, c.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

fn load_model(checkpoint: &Path) -> Result<(SegModel, ClassCatalog)> {
    require_dir(checkpoint, "checkpoint")?;
    let (model, meta) = load_checkpoint(checkpoint)?;
    Ok((model, meta.catalog))
}

fn eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let manifest = manifest(cfg)?;
    let (model, catalog) = load_model(checkpoint)?;
    let split = cfg.data.split;
    let samples = non_empty(load_split(&manifest, split, model.config().input_size, &catalog)?, split, &manifest)?;
    let metrics = trainer::evaluate_samples(&model, &samples, &catalog)?;
    io::ensure_dir(out)?;
    metrics.write_csv(&out.join("metrics.csv"))?;
    io::write_json(&out.join("metrics.json"), &metrics)?;
    log::info!("{} images: mean iou {:?} dice {:?}", metrics.n_images, metrics.mean.iou, metrics.mean.dice);
    Ok(())
}

/// Segments at model resolution and maps the mask back to the image size.
fn segment(model: &SegModel, image: &RasterImage) -> Result<LabelMask> {
    let s = model.config().input_size;
    let (_, mask) = if image.width() == s && image.height() == s {
        model.predict(image)?
    } else {
        model.predict(&resize_image(image, s, s))?
    };
    Ok(resize_mask(&mask, image.width(), image.height()))
}

fn image_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    require_dir(input, "input")?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::Validation(format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!("no PNG or TIFF images in {}", input.display())));
    }
    Ok(files)
}

fn predict(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    cfg.stain.validate()?;
    let files = image_inputs(input)?;
    let (model, _) = load_model(checkpoint)?;
    for f in files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let image = io::read_image(&f)?;
        let mask = segment(&model, &image)?;
        io::write_mask(&out.join("masks").join(format!("{stem}.png")), &mask)?;
        io::write_image(&out.join("overlays").join(format!("{stem}.png")), &quantify::overlay(&image, &mask, &cfg.stain)?)?;
    }
    Ok(())
}

fn od_rows(id: &str, source: MaskSource, image: &RasterImage, mask: &LabelMask, cfg: &RunConfig, catalog: &ClassCatalog) -> Result<Vec<OdRow>> {
    if cfg.quantify.hemispheres {
        let halves = quantify::quantify_hemispheres(image, mask, catalog, &cfg.stain)?;
        Ok(halves
            .iter()
            .flat_map(|(h, rs)| {
                let sid = format!("{id}_{}", serde_json::to_value(h).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
                rs.iter().map(move |r| OdRow::from_result(&sid, source, r)).collect::<Vec<_>>()
            })
            .collect())
    } else {
        let rs = quantify::quantify_sample(image, mask, catalog, &cfg.stain, 1)?;
        Ok(rs.iter().map(|r| OdRow::from_result(id, source, r)).collect())
    }
}

fn quantify_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    cfg.stain.validate()?;
    let manifest = manifest(cfg)?;
    let model = checkpoint.map(load_model).transpose()?;
    let catalog = model.as_ref().map(|(_, c)| c.clone()).unwrap_or_default();
    let entries = io::read_manifest(&manifest)?;
    let split = cfg.data.split;
    let samples = non_empty(io::samples_in(&entries, split), split, &manifest)?;
    let mut rows = Vec::new();
    for s in samples {
        let image = io::read_image(&io::resolve(&manifest, &s.image_path))?;
        let gt = io::read_mask(&io::resolve(&manifest, &s.mask_path))?;
        rows.extend(od_rows(&s.sample_id, MaskSource::Gt, &image, &gt, cfg, &catalog)?);
        if cfg.quantify.overlays {
            io::write_image(&out.join("overlays").join(format!("{}_gt.png", s.sample_id)), &quantify::overlay(&image, &gt, &cfg.stain)?)?;
        }
        if let Some((m, _)) = &model {
            let pred = segment(m, &image)?;
            rows.extend(od_rows(&s.sample_id, MaskSource::Model, &image, &pred, cfg, &catalog)?);
            if cfg.quantify.overlays {
                io::write_image(&out.join("overlays").join(format!("{}_model.png", s.sample_id)), &quantify::overlay(&image, &pred, &cfg.stain)?)?;
            }
        }
    }
    quantify::write_od_csv(&out.join("od.csv"), &rows)?;
    log::info!("{} OD rows", rows.len());
    Ok(())
}

fn correlate(od: &Path, out: &Path) -> Result<()> {
    require_file(od, "OD table")?;
    let rows = quantify::read_od_csv(od)?;
    let (entries, _) = report::write_correlations(&rows, out)?;
    io::write_json(&out.join("correlation.json"), &entries)?;
    for e in &entries {
        match &e.result {
            Some(c) => log::info!("{}: n {} r {:.4} R² {:.4} p {:.3e}", e.scope, c.n, c.pearson_r, c.r_squared, c.p_value),
            None => log::warn!("{}: {}", e.scope, e.error.as_deref().unwrap_or("")),
        }
    }
    if entries.iter().all(|e| e.result.is_none()) {
        return Err(Error::Degenerate(format!("no correlation could be computed from {}", od.display())));
    }
    Ok(())
}

fn preview(cfg: &RunConfig, image: &Path, mask: &Path, out: &Path) -> Result<()> {
    let aug: &AugmentationConfig = &cfg.augment;
    aug.validate()?;
    require_file(image, "image")?;
    require_file(mask, "mask")?;
    let img = io::read_image(image)?;
    let m = io::read_mask(mask)?;
    augment::preview(&img, &m, aug, cfg.preview.n, cfg.preview.mode, out)?;
    Ok(())
}

fn report_cmd(a: &ReportArgs, out: &Path) -> Result<()> {
    let metrics = |p: &Option<PathBuf>| -> Result<Option<DatasetMetrics>> {
        p.as_deref()
            .map(|p| {
                require_file(p, "metrics file")?;
                io::read_json(p)
            })
            .transpose()
    };
    let od_rows = a
        .od
        .as_deref()
        .map(|p| {
            require_file(p, "OD table")?;
            quantify::read_od_csv(p)
        })
        .transpose()?;
    let inputs = ReportInputs { with_et: metrics(&a.metrics)?, without_et: metrics(&a.metrics_without_et)?, od_rows };
    let r = report::build_report(&inputs, out)?;
    for m in &r.missing {
        log::warn!("missing: {m}");
    }
    Ok(())
}
