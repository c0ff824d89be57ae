//! Encoder-decoder segmentation network.
//!
//! A backbone encoder produces five feature maps at strides 2 to 32; a UNet
//! decoder upsamples them back to input resolution with skip connections, and
//! a per-pixel softmax turns the logits into class probabilities.

mod checkpoint;
mod decoder;
pub mod encoders;
pub mod nn;

use std::path::PathBuf;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::preprocess::{normalize_image, ChannelStats};
use crate::types::{argmax_decode, LabelMask, ProbabilityMap, RasterImage};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA};
use decoder::UnetDecoder;
use encoders::Encoder;
pub use nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneName {
    #[serde(rename = "vgg19")]
    Vgg19,
    #[serde(rename = "resnet34")]
    Resnet34,
    #[serde(rename = "resnet50")]
    Resnet50,
    #[serde(rename = "densenet121")]
    Densenet121,
    #[serde(rename = "efficientnet-b5")]
    EfficientnetB5,
    #[serde(rename = "mobilenet")]
    Mobilenet,
    #[serde(rename = "tiny-test")]
    TinyTest,
}

impl BackboneName {
    pub const ALL: [BackboneName; 7] = [
        BackboneName::Vgg19,
        BackboneName::Resnet34,
        BackboneName::Resnet50,
        BackboneName::Densenet121,
        BackboneName::EfficientnetB5,
        BackboneName::Mobilenet,
        BackboneName::TinyTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::Vgg19 => "vgg19",
            BackboneName::Resnet34 => "resnet34",
            BackboneName::Resnet50 => "resnet50",
            BackboneName::Densenet121 => "densenet121",
            BackboneName::EfficientnetB5 => "efficientnet-b5",
            BackboneName::Mobilenet => "mobilenet",
            BackboneName::TinyTest => "tiny-test",
        }
    }

    /// Channels of the five encoder stages.
    pub fn stage_widths(self) -> [usize; 5] {
        match self {
            BackboneName::Vgg19 => encoders::Vgg19::WIDTHS,
            BackboneName::Resnet34 => encoders::ResNet::WIDTHS_34,
            BackboneName::Resnet50 => encoders::ResNet::WIDTHS_50,
            BackboneName::Densenet121 => encoders::DenseNet121::WIDTHS,
            BackboneName::EfficientnetB5 => encoders::EFFICIENTNET_B5_WIDTHS,
            BackboneName::Mobilenet => encoders::MOBILENET_WIDTHS,
            BackboneName::TinyTest => [8, 16, 24, 32, 40],
        }
    }
}

impl FromStr for BackboneName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneName::ALL.into_iter().find(|b| b.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = BackboneName::ALL.iter().map(|b| b.as_str()).collect();
            invalid!("unknown backbone {s:?}; expected one of {}", names.join(", "))
        })
    }
}

impl std::fmt::Display for BackboneName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: BackboneName,
    /// Only `tiny-test` accepts widths other than its defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_channel_widths: Option<[usize; 5]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_weights: Option<PathBuf>,
}

impl BackboneSpec {
    pub fn new(name: BackboneName) -> Self {
        Self { name, stage_channel_widths: None, pretrained_weights: None }
    }

    pub fn widths(&self) -> [usize; 5] {
        self.stage_channel_widths.unwrap_or_else(|| self.name.stage_widths())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegModelConfig {
    pub backbone: BackboneSpec,
    pub n_classes: usize,
    pub input_size: usize,
    pub decoder_channel_widths: [usize; 5],
    /// Per-channel standardisation after scaling to [0, 1]; `None` keeps [0, 1].
    pub normalization: Option<ChannelStats>,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::new(BackboneName::EfficientnetB5),
            n_classes: 3,
            input_size: 1024,
            decoder_channel_widths: [256, 128, 64, 32, 16],
            normalization: None,
        }
    }
}

impl SegModelConfig {
    /// The small CPU configuration used for tests and desk-scale runs.
    pub fn tiny(input_size: usize) -> Self {
        Self {
            backbone: BackboneSpec::new(BackboneName::TinyTest),
            input_size,
            decoder_channel_widths: [32, 24, 16, 8, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(invalid!("input_size must be a positive multiple of 32, got {}", self.input_size));
        }
        if self.n_classes < 2 {
            return Err(invalid!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.decoder_channel_widths.contains(&0) {
            return Err(invalid!("decoder_channel_widths must be positive"));
        }
        if let Some(w) = self.backbone.stage_channel_widths {
            if w.contains(&0) {
                return Err(invalid!("stage_channel_widths must be positive"));
            }
            if self.backbone.name != BackboneName::TinyTest && w != self.backbone.name.stage_widths() {
                return Err(invalid!(
                    "{} has fixed stage widths {:?}; got {w:?}",
                    self.backbone.name,
                    self.backbone.name.stage_widths()
                ));
            }
        }
        Ok(())
    }
}

/// A built network and its parameters.
pub struct SegModel {
    config: SegModelConfig,
    seed: u64,
    store: ParamStore,
    encoder: Box<dyn Encoder>,
    decoder: UnetDecoder,
}

impl std::fmt::Debug for SegModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegModel")
            .field("backbone", &self.config.backbone.name)
            .field("input_size", &self.config.input_size)
            .field("parameters", &self.store.num_parameters())
            .finish()
    }
}

impl SegModel {
    /// Builds with seeded initialisation, then applies pretrained weights if configured.
    pub fn build(config: &SegModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed);
        let root = store.root();
        let enc = root.pp("encoder");
        let encoder: Box<dyn Encoder> = match config.backbone.name {
            BackboneName::TinyTest => Box::new(encoders::Tiny::new(&enc, config.backbone.widths())?),
            BackboneName::Vgg19 => Box::new(encoders::Vgg19::new(&enc)?),
            BackboneName::Resnet34 => Box::new(encoders::ResNet::resnet34(&enc)?),
            BackboneName::Resnet50 => Box::new(encoders::ResNet::resnet50(&enc)?),
            BackboneName::Densenet121 => Box::new(encoders::DenseNet121::new(&enc)?),
            BackboneName::EfficientnetB5 => Box::new(encoders::efficientnet_b5(&enc)?),
            BackboneName::Mobilenet => Box::new(encoders::mobilenet_v2(&enc)?),
        };
        let decoder =
            UnetDecoder::new(&root.pp("decoder"), encoder.channels(), config.decoder_channel_widths, config.n_classes)?;
        let model = Self { config: config.clone(), seed, store, encoder, decoder };
        if let Some(path) = &config.backbone.pretrained_weights {
            model.load_pretrained(path)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn encoder_parameters(&self) -> usize {
        self.store.num_parameters_with_prefix("encoder.")
    }

    /// Copies matching tensors from a safetensors file. Names absent from the
    /// file keep their values; any shape mismatch is an error naming each layer.
    pub fn load_pretrained(&self, path: &std::path::Path) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path, self.device())
            .map_err(|e| Error::WeightLoad(format!("{}: {e}", path.display())))?;
        let n = self.store.load(&tensors, true)?;
        if n == 0 {
            return Err(Error::WeightLoad(format!("{}: no tensor names match this model", path.display())));
        }
        Ok(n)
    }

    /// Logits `[B, C, H, W]` for a normalised input batch `[B, 3, H, W]`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % 32 != 0 || w % 32 != 0 {
            return Err(invalid!("model input must be [B, 3, H, W] with H and W multiples of 32, got {:?}", x.dims()));
        }
        let feats = self.encoder.forward_t(x, train)?;
        self.decoder.forward_t(&feats, train)
    }

    /// Stacks images into a normalised input batch.
    pub fn input_tensor(&self, images: &[&RasterImage]) -> Result<Tensor> {
        let s = self.config.input_size;
        if let Some(bad) = images.iter().find(|im| im.width() != s || im.height() != s) {
            return Err(invalid!(
                "image is {}x{} but the model expects {s}x{s}; resize it first (preprocess target_size = {s})",
                bad.width(),
                bad.height()
            ));
        }
        images_to_tensor(images, self.config.normalization.as_ref(), self.device())
    }

    /// Softmax probabilities and argmax mask, in inference mode.
    pub fn predict(&self, image: &RasterImage) -> Result<(ProbabilityMap, LabelMask)> {
        Ok(self.predict_batch(&[image])?.pop().expect("one output per input"))
    }

    pub fn predict_batch(&self, images: &[&RasterImage]) -> Result<Vec<(ProbabilityMap, LabelMask)>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.input_tensor(images)?;
        let logits = self.forward_t(&x, false)?;
        let (b, c, h, w) = logits.dims4()?;
        // class axis innermost to match ProbabilityMap
        let flat: Vec<f64> = logits.permute((0, 2, 3, 1))?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        (0..b)
            .map(|i| {
                let probs = softmax_head(&flat[i * h * w * c..(i + 1) * h * w * c], w, h, c)?;
                let mask = argmax_decode(&probs);
                Ok((probs, mask))
            })
            .collect()
    }
}

/// `[B, 3, H, W]` f32 batch from same-sized images.
pub fn images_to_tensor(images: &[&RasterImage], stats: Option<&ChannelStats>, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| invalid!("empty image batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for im in images {
        if (im.width(), im.height()) != (w, h) {
            return Err(invalid!("batch mixes {w}x{h} and {}x{} images", im.width(), im.height()));
        }
        data.extend(normalize_image(im, stats).data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

/// `[B, H, W]` u32 class ids.
pub fn masks_to_tensor(masks: &[&LabelMask], device: &Device) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| invalid!("empty mask batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        if (m.width(), m.height()) != (w, h) {
            return Err(invalid!("batch mixes {w}x{h} and {}x{} masks", m.width(), m.height()));
        }
        data.extend(m.data().iter().map(|&v| v as u32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), h, w), device)?)
}

/// Max-subtracted softmax over each pixel's logits (class axis innermost).
pub fn softmax_head(logits: &[f64], width: usize, height: usize, classes: usize) -> Result<ProbabilityMap> {
    if classes == 0 || logits.len() != width * height * classes {
        return Err(invalid!("{} logits do not fill {width}x{height}x{classes}", logits.len()));
    }
    let mut out = Vec::with_capacity(logits.len());
    for (p, row) in logits.chunks_exact(classes).enumerate() {
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "logit {v} at pixel {p} (x={}, y={})",
                p % width.max(1),
                p / width.max(1)
            )));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - m).exp()));
        let s: f64 = out[start..].iter().sum();
        for v in &mut out[start..] {
            *v /= s;
        }
    }
    ProbabilityMap::new(width, height, classes, out)
}
