use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SegModel, SegModelConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::types::ClassCatalog;

pub const CHECKPOINT_SCHEMA: &str = "nigra-checkpoint/v1";
const CONFIG_FILE: &str = "config.json";
const WEIGHTS_FILE: &str = "weights.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema: String,
    pub model: SegModelConfig,
    pub catalog: ClassCatalog,
    pub seed: u64,
    pub parameter_digest: String,
    /// Free-form record from the trainer (epoch, losses, config).
    #[serde(default)]
    pub training: serde_json::Value,
}

/// Writes `config.json` and `weights.safetensors` into `dir`.
pub fn save_checkpoint(
    model: &SegModel,
    catalog: &ClassCatalog,
    training: serde_json::Value,
    dir: &Path,
) -> Result<CheckpointMeta> {
    io::ensure_dir(dir)?;
    let meta = CheckpointMeta {
        schema: CHECKPOINT_SCHEMA.to_string(),
        model: model.config().clone(),
        catalog: catalog.clone(),
        seed: model.seed(),
        parameter_digest: model.params().digest()?,
        training,
    };
    let tensors: HashMap<String, _> = model.params().snapshot()?.into_iter().collect();
    candle_core::safetensors::save(&tensors, dir.join(WEIGHTS_FILE))?;
    io::write_json(&dir.join(CONFIG_FILE), &meta)?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(SegModel, CheckpointMeta)> {
    let meta: CheckpointMeta = io::read_json(&dir.join(CONFIG_FILE))?;
    if meta.schema != CHECKPOINT_SCHEMA {
        return Err(Error::WeightLoad(format!(
            "{}: schema {:?}, expected {CHECKPOINT_SCHEMA:?}",
            dir.display(),
            meta.schema
        )));
    }
    let mut cfg = meta.model.clone();
    // stored weights supersede any pretrained source
    cfg.backbone.pretrained_weights = None;
    let model = SegModel::build(&cfg, meta.seed)?;
    let path = dir.join(WEIGHTS_FILE);
    let tensors = candle_core::safetensors::load(&path, model.device())
        .map_err(|e| Error::WeightLoad(format!("{}: {e}", path.display())))?;
    model.params().load(&tensors, false)?;
    Ok((model, meta))
}
