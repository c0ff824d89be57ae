//! Mini-batch training with plateau learning-rate decay, early stopping and
//! best-checkpoint retention, plus the backbone/image-size sweep.

mod schedule;
pub mod sweep;

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use candle_nn::Optimizer;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentationConfig};
use crate::error::{invalid, Error, Result};
use crate::io;
use crate::lossmetrics::{self, loss::one_hot_tensor, DatasetMetrics, LossKind};
use crate::model::{masks_to_tensor, save_checkpoint, SegModel};
use crate::preprocess::{resize_pair, shuffle_order};
use crate::seeds;
use crate::types::{ClassCatalog, LabelMask, RasterImage, Split};

pub use schedule::{EarlyStopping, PlateauScheduler};
pub use sweep::{cell_config, run_backbone_sweep, SweepCell, SweepPlan, SweepReport, REFERENCE_BEST_IOU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(invalid!("unknown optimizer {s:?}; expected adam or sgd")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub sgd_momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    /// Minimum decrease of validation loss that counts as improvement.
    pub min_delta: f64,
    pub smooth: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Dice,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            sgd_momentum: 0.9,
            epochs: 50,
            batch_size: 4,
            plateau_patience: 5,
            plateau_factor: 0.1,
            min_lr: 1e-6,
            early_stop_patience: 10,
            min_delta: 1e-6,
            smooth: lossmetrics::DEFAULT_SMOOTH,
            seed: 0,
        }
    }
}

pub const BATCH_SIZES: [usize; 3] = [2, 4, 8];
pub const LR_RANGE: (f64, f64) = (1e-6, 1e-3);

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate;
        if !(LR_RANGE.0..=LR_RANGE.1).contains(&lr) {
            return Err(invalid!("learning_rate {lr} outside the allowed range [1e-6, 1e-3]"));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= lr) {
            return Err(invalid!("min_lr {} must be positive and at most learning_rate {lr}", self.min_lr));
        }
        if !BATCH_SIZES.contains(&self.batch_size) {
            return Err(invalid!("batch_size must be one of 2, 4, 8, got {}", self.batch_size));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(invalid!("patience values must be at least 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(invalid!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(invalid!("adam_betas must lie in [0, 1), got {:?}", self.adam_betas));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(invalid!("sgd_momentum must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(invalid!("epochs must be at least 1"));
        }
        if !(self.min_delta >= 0.0 && self.smooth >= 0.0) {
            return Err(invalid!("min_delta and smooth must be non-negative"));
        }
        Ok(())
    }
}

/// SGD with classical momentum: `v = mu v + g`, `theta -= lr v`.
pub struct SgdMomentum {
    vars: Vec<(Var, Option<Tensor>)>,
    lr: f64,
    momentum: f64,
}

impl SgdMomentum {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64) -> Self {
        Self { vars: vars.into_iter().map(|v| (v, None)).collect(), lr, momentum }
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        for (var, vel) in &mut self.vars {
            let Some(g) = grads.get(var) else { continue };
            let v = match vel.take() {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g.clone(),
            };
            var.set(&(var.as_tensor() - (&v * self.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

enum Optim {
    Adam(candle_nn::AdamW),
    Sgd(SgdMomentum),
}

impl Optim {
    fn new(model: &SegModel, cfg: &TrainConfig) -> Result<Self> {
        let vars = model.params().trainable_vars();
        Ok(match cfg.optimizer {
            OptimizerKind::Adam => Optim::Adam(candle_nn::AdamW::new(
                vars,
                candle_nn::ParamsAdamW {
                    lr: cfg.learning_rate,
                    beta1: cfg.adam_betas.0,
                    beta2: cfg.adam_betas.1,
                    eps: 1e-7,
                    weight_decay: 0.0,
                },
            )?),
            OptimizerKind::Sgd => Optim::Sgd(SgdMomentum::new(vars, cfg.learning_rate, cfg.sgd_momentum)),
        })
    }

    fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        match self {
            Optim::Adam(o) => Ok(o.step(grads)?),
            Optim::Sgd(o) => o.step(grads),
        }
    }

    fn set_lr(&mut self, lr: f64) {
        match self {
            Optim::Adam(o) => o.set_learning_rate(lr),
            Optim::Sgd(o) => o.lr = lr,
        }
    }
}

/// An image and mask at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub image: RasterImage,
    pub mask: LabelMask,
}

/// Reads one split of a manifest and resizes every pair to `size`.
pub fn load_split(manifest: &Path, split: Split, size: usize, catalog: &ClassCatalog) -> Result<Vec<LoadedSample>> {
    let entries = io::read_manifest(manifest)?;
    io::samples_in(&entries, split)
        .into_iter()
        .map(|s| {
            let image = io::read_image(&io::resolve(manifest, &s.image_path))?;
            let mask = io::read_mask(&io::resolve(manifest, &s.mask_path))?;
            mask.validate(catalog)
                .map_err(|e| invalid!("{}: {e}", s.mask_path))?;
            let (image, mask) = resize_pair(&image, &mask, size, false)?;
            Ok(LoadedSample { id: s.sample_id.clone(), image, mask })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochsExhausted,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Wall time; kept out of written artifacts so reruns compare equal.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub lr: f64,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub best_val_miou: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub stop_reason: StopReason,
}

impl TrainState {
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            io::ensure_dir(p)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_loss", "val_miou", "lr"])?;
        for r in &self.history {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.9}", r.train_loss),
                format!("{:.9}", r.val_loss),
                r.val_miou.map(|v| format!("{v:.9}")).unwrap_or_default(),
                format!("{:e}", r.lr),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn batch_tensors(model: &SegModel, samples: &[&LoadedSample], classes: usize) -> Result<(Tensor, Tensor)> {
    let imgs: Vec<&RasterImage> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&LabelMask> = samples.iter().map(|s| &s.mask).collect();
    let x = model.input_tensor(&imgs)?;
    let y = one_hot_tensor(&masks_to_tensor(&masks, model.device())?, classes)?;
    Ok((x, y))
}

/// Validation loss (mean of per-image losses) and mean foreground IoU, in
/// inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitScore {
    pub loss: f64,
    pub miou: Option<f64>,
    pub metrics: DatasetMetrics,
}

pub fn score_split(
    model: &SegModel,
    samples: &[LoadedSample],
    loss: LossKind,
    smooth: f64,
    catalog: &ClassCatalog,
) -> Result<SplitScore> {
    if samples.is_empty() {
        return Err(Error::Config("cannot score an empty split".into()));
    }
    let mut total = 0.0;
    let mut per_image = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(4) {
        let refs: Vec<&LoadedSample> = chunk.iter().collect();
        let (x, y) = batch_tensors(model, &refs, catalog.len())?;
        let logits = model.forward_t(&x, false)?;
        let pred = logits.argmax(1)?.to_dtype(DType::U8)?;
        for (i, s) in chunk.iter().enumerate() {
            let l = loss
                .tensor_loss(&logits.narrow(0, i, 1)?, &y.narrow(0, i, 1)?, smooth)?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            total += l;
            let data: Vec<u8> = pred.get(i)?.flatten_all()?.to_vec1()?;
            let p = LabelMask::new(s.mask.width(), s.mask.height(), data)?;
            per_image.push((s.id.clone(), lossmetrics::evaluate(&p, &s.mask, catalog, None)?));
        }
    }
    let metrics = lossmetrics::aggregate(per_image);
    Ok(SplitScore { loss: total / samples.len() as f64, miou: metrics.mean.iou, metrics })
}

/// Test-split metrics of a model: per-image reports and their mean.
pub fn evaluate_samples(model: &SegModel, samples: &[LoadedSample], catalog: &ClassCatalog) -> Result<DatasetMetrics> {
    Ok(score_split(model, samples, LossKind::Dice, lossmetrics::DEFAULT_SMOOTH, catalog)?.metrics)
}

pub struct TrainInputs<'a> {
    pub train: &'a [LoadedSample],
    pub val: &'a [LoadedSample],
    pub catalog: &'a ClassCatalog,
    pub augmentation: &'a AugmentationConfig,
}

/// Trains `model` in place. When `out_dir` is given, the best checkpoint goes
/// to `out_dir/best` and `history.csv` plus `train_state.json` are written.
pub fn train(model: &SegModel, inputs: &TrainInputs, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainState> {
    cfg.validate()?;
    inputs.augmentation.validate()?;
    if inputs.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if inputs.val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    if model.config().n_classes != inputs.catalog.len() {
        return Err(Error::Config(format!(
            "model has {} classes but the catalog has {}",
            model.config().n_classes,
            inputs.catalog.len()
        )));
    }
    let classes = inputs.catalog.len();
    let mut opt = Optim::new(model, cfg)?;
    let mut sched = PlateauScheduler::new(
        cfg.learning_rate,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.min_lr,
        cfg.min_delta,
    );
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.min_delta);
    let mut state = TrainState {
        epoch: 0,
        history: Vec::new(),
        lr: cfg.learning_rate,
        best_epoch: None,
        best_val_loss: None,
        best_val_miou: None,
        best_checkpoint: None,
        stop_reason: StopReason::EpochsExhausted,
    };
    let best_dir = out_dir.map(|d| d.join("best"));

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = state.lr;
        opt.set_lr(lr);
        let order = shuffle_order(inputs.train.len(), seeds::mix(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let augmented = batch
                .iter()
                .map(|&i| {
                    let s = &inputs.train[i];
                    let draw = seeds::mix3(cfg.seed, epoch as u64, i as u64);
                    let (image, mask) = augment::apply(&s.image, &s.mask, inputs.augmentation, draw)?;
                    Ok(LoadedSample { id: s.id.clone(), image, mask })
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&LoadedSample> = augmented.iter().collect();
            let (x, y) = batch_tensors(model, &refs, classes)?;
            let logits = model.forward_t(&x, true)?;
            let loss = cfg.loss.tensor_loss(&logits, &y, cfg.smooth)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                let ids: Vec<&str> = augmented.iter().map(|s| s.id.as_str()).collect();
                return Err(Error::Diverged(format!("loss {value} at epoch {epoch}, lr {lr:e}, batch {ids:?}")));
            }
            opt.step(&loss.backward()?)?;
            loss_sum += value * batch.len() as f64;
        }
        let train_loss = loss_sum / inputs.train.len() as f64;
        let val = score_split(model, inputs.val, cfg.loss, cfg.smooth, inputs.catalog)?;
        if !val.loss.is_finite() {
            return Err(Error::Diverged(format!("validation loss {} at epoch {epoch}, lr {lr:e}", val.loss)));
        }
        let (improved, stop) = stopper.step(epoch, val.loss);
        state.lr = sched.step(val.loss);
        state.epoch = epoch;
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_miou: val.miou,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.5} val_loss {:.5} val_miou {} lr {lr:e} ({:.1}s)",
            val.loss,
            val.miou.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            started.elapsed().as_secs_f64()
        );
        if improved {
            state.best_epoch = Some(epoch);
            state.best_val_loss = Some(val.loss);
            state.best_val_miou = val.miou;
            if let Some(dir) = &best_dir {
                let meta = serde_json::json!({
                    "epoch": epoch,
                    "val_loss": val.loss,
                    "val_miou": val.miou,
                    "train_config": cfg,
                    "augmentation": inputs.augmentation,
                });
                save_checkpoint(model, inputs.catalog, meta, dir)?;
                state.best_checkpoint = Some(dir.clone());
            }
        }
        if stop {
            state.stop_reason = StopReason::EarlyStopped;
            break;
        }
    }
    if let Some(dir) = out_dir {
        state.write_history_csv(&dir.join("history.csv"))?;
        io::write_json(&dir.join("train_state.json"), &state)?;
    }
    Ok(state)
}

/// Repeated steps on one fixed batch without augmentation. Returns the loss
/// before each step followed by the final loss.
pub fn overfit_single_batch(model: &SegModel, batch: &[LoadedSample], cfg: &TrainConfig, steps: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let refs: Vec<&LoadedSample> = batch.iter().collect();
    let (x, y) = batch_tensors(model, &refs, model.config().n_classes)?;
    let mut opt = Optim::new(model, cfg)?;
    let mut trace = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let loss = cfg.loss.tensor_loss(&model.forward_t(&x, true)?, &y, cfg.smooth)?;
        trace.push(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        opt.step(&loss.backward()?)?;
    }
    let last = cfg.loss.tensor_loss(&model.forward_t(&x, true)?, &y, cfg.smooth)?;
    trace.push(last.to_dtype(DType::F64)?.to_scalar::<f64>()?);
    Ok(trace)
}

/// Outcome of a single optimiser step on a frozen batch.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateCoverage {
    pub with_gradient: usize,
    pub changed: usize,
    /// Parameters that had a nonzero gradient but did not move.
    pub stuck: Vec<String>,
}

pub fn update_coverage(model: &SegModel, batch: &[LoadedSample], cfg: &TrainConfig) -> Result<UpdateCoverage> {
    let refs: Vec<&LoadedSample> = batch.iter().collect();
    let (x, y) = batch_tensors(model, &refs, model.config().n_classes)?;
    let named = model.params().trainable_named();
    let before: Vec<Tensor> = named.iter().map(|(_, v)| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?;
    let loss = cfg.loss.tensor_loss(&model.forward_t(&x, true)?, &y, cfg.smooth)?;
    let grads = loss.backward()?;
    let mut opt = Optim::new(model, cfg)?;
    opt.step(&grads)?;
    let mut cov = UpdateCoverage { with_gradient: 0, changed: 0, stuck: Vec::new() };
    for ((name, var), old) in named.iter().zip(before) {
        let Some(g) = grads.get(var) else { continue };
        if g.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? == 0.0 {
            continue;
        }
        cov.with_gradient += 1;
        let moved = (var.as_tensor() - old)?.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if moved > 0.0 {
            cov.changed += 1;
        } else {
            cov.stuck.push(name.clone());
        }
    }
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_checkpoint, SegModelConfig};
    use crate::synthdata::{generate_phantom, PhantomSpec};

    fn samples(n: u64, size: usize) -> Vec<LoadedSample> {
        let spec = PhantomSpec { image_size: size, ..Default::default() };
        (0..n)
            .map(|i| {
                let p = generate_phantom(&spec, i).unwrap();
                LoadedSample { id: format!("s{i}"), image: p.image, mask: p.mask }
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { learning_rate: 1e-2, ..Default::default() },
            TrainConfig { batch_size: 3, ..Default::default() },
            TrainConfig { min_lr: 1e-2, ..Default::default() },
            TrainConfig { plateau_patience: 0, ..Default::default() },
        ] {
            assert!(bad.validate().unwrap_err().is_validation());
        }
    }

    #[test]
    fn sgd_momentum_by_hand() {
        let v = Var::new(&[1.0f32], &candle_core::Device::Cpu).unwrap();
        let mut o = SgdMomentum::new(vec![v.clone()], 0.1, 0.9);
        for _ in 0..2 {
            // d/dv (2 v) = 2
            let loss = (v.as_tensor() * 2.0).unwrap().sum_all().unwrap();
            o.step(&loss.backward().unwrap()).unwrap();
        }
        // v1 = 1 - 0.1*2 = 0.8; vel2 = 0.9*2 + 2 = 3.8; v2 = 0.8 - 0.38 = 0.42
        let got = v.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert!((got - 0.42).abs() < 1e-6, "{got}");
    }

    #[test]
    fn one_adam_step_moves_every_parameter_with_gradient() {
        let model = SegModel::build(&SegModelConfig::tiny(64), 0).unwrap();
        let cov = update_coverage(&model, &samples(2, 64), &TrainConfig::default()).unwrap();
        assert!(cov.with_gradient > 0);
        assert!(cov.stuck.is_empty(), "{:?}", cov.stuck);
        assert_eq!(cov.changed, cov.with_gradient);
    }

    #[test]
    fn empty_splits_are_config_errors() {
        let model = SegModel::build(&SegModelConfig::tiny(64), 0).unwrap();
        let s = samples(1, 64);
        let cat = ClassCatalog::default();
        let aug = AugmentationConfig::identity();
        let err = train(&model, &TrainInputs { train: &s, val: &[], catalog: &cat, augmentation: &aug }, &TrainConfig::default(), None)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn short_run_is_deterministic_and_checkpoint_reloads() {
        let data = samples(6, 64);
        let cat = ClassCatalog::default();
        let aug = AugmentationConfig { seed: 1, ..AugmentationConfig::default() }.without_elastic();
        let cfg = TrainConfig { epochs: 2, batch_size: 2, seed: 5, ..Default::default() };
        let inputs = TrainInputs { train: &data[..4], val: &data[4..], catalog: &cat, augmentation: &aug };
        let dir = tempfile::tempdir().unwrap();
        let run = |out: Option<&Path>| {
            let m = SegModel::build(&SegModelConfig::tiny(64), 3).unwrap();
            let st = train(&m, &inputs, &cfg, out).unwrap();
            (st, m.params().digest().unwrap())
        };
        let (a, da) = run(Some(dir.path()));
        let (b, db) = run(None);
        assert_eq!(da, db);
        let strip = |s: &TrainState| s.history.iter().map(|r| (r.train_loss, r.val_loss, r.lr)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert!(a.history.windows(2).all(|w| w[1].lr <= w[0].lr));
        assert!(dir.path().join("history.csv").exists());
        let (m, _) = load_checkpoint(&dir.path().join("best")).unwrap();
        let again = score_split(&m, &data[4..], cfg.loss, cfg.smooth, &cat).unwrap();
        assert!((again.loss - a.best_val_loss.unwrap()).abs() < 1e-6);
    }
}
