//! The run configuration tree: JSON sections per module, unknown-key
//! detection against a schema tree, and dotted-path overrides.

use std::path::PathBuf;

use nigra_core::augment::{AugmentationConfig, PreviewMode};
use nigra_core::model::{BackboneName, SegModelConfig};
use nigra_core::preprocess::ChannelStats;
use nigra_core::quantify::StainConfig;
use nigra_core::synthdata::PhantomSpec;
use nigra_core::trainer::TrainConfig;
use nigra_core::{Error, Result, Split};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub split: Split,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, split: Split::Test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub backbones: Vec<BackboneName>,
    pub image_sizes: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            backbones: BackboneName::ALL.to_vec(),
            image_sizes: vec![512, 768, 1024],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantifyConfig {
    /// Split each section at the vertical midline.
    pub hemispheres: bool,
    /// Write stain overlays next to the OD table.
    pub overlays: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreviewConfig {
    pub n: usize,
    pub mode: PreviewMode,
}

impl Default for PreviewConfig {
    fn default() -> Self {
        Self { n: 8, mode: PreviewMode::Random }
    }
}

/// Every section a subcommand may read. A top-level `seed` overrides the
/// section seeds (phantom, train, augment).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub phantom: PhantomSpec,
    pub model: SegModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub sweep: SweepConfig,
    pub stain: StainConfig,
    pub quantify: QuantifyConfig,
    pub preview: PreviewConfig,
}

/// Subtrees validated by serde alone (tagged enums, free-form values).
const OPAQUE: [&str; 2] = ["phantom.layout", "model.normalization"];

/// Default tree with every optional field populated so that its keys are visible.
pub fn schema() -> Value {
    let mut cfg = RunConfig { seed: Some(0), ..Default::default() };
    cfg.data.manifest = Some(PathBuf::new());
    cfg.model.backbone.stage_channel_widths = Some([0; 5]);
    cfg.model.backbone.pretrained_weights = Some(PathBuf::new());
    cfg.model.normalization = Some(ChannelStats { mean: [0.0; 3], std: [1.0; 3] });
    serde_json::to_value(cfg).expect("config serializes")
}

/// Dotted paths of every key under `sections` (all when empty), sorted.
pub fn keys(sections: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    collect_leaves(&schema(), "", &mut out);
    out.retain(|k| sections.is_empty() || sections.iter().any(|s| k == s || k.starts_with(&format!("{s}."))));
    out.sort();
    out
}

fn collect_leaves(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(m) if !OPAQUE.contains(&prefix) => {
            for (k, child) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_leaves(child, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Keys of `user` that the schema does not know, as dotted paths.
pub fn unknown_keys(user: &Value) -> Vec<String> {
    let mut out = Vec::new();
    walk_unknown(user, &schema(), "", &mut out);
    out
}

fn walk_unknown(user: &Value, schema: &Value, prefix: &str, out: &mut Vec<String>) {
    if OPAQUE.contains(&prefix) {
        return;
    }
    if let (Value::Object(u), Value::Object(s)) = (user, schema) {
        for (k, child) in u {
            let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match s.get(k) {
                Some(sc) => walk_unknown(child, sc, &p, out),
                None => out.push(p),
            }
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses `path=value`; the value is JSON when it parses as JSON, else a string.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form dotted.path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.trim().to_string(), value))
}

fn set_path(tree: &mut Value, path: &str, value: Value) {
    let mut cur = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !cur.get(*part).is_some_and(Value::is_object) {
            cur[*part] = Value::Object(Map::new());
        }
        cur = &mut cur[*part];
    }
    cur[parts[parts.len() - 1]] = value;
}

/// Layers the user file, then `overrides` in order, onto the defaults. Unknown
/// keys anywhere are reported together.
pub fn resolve(file: Option<Value>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut user = file.unwrap_or_else(|| Value::Object(Map::new()));
    if !user.is_object() {
        return Err(Error::Config("config file must hold a JSON object".into()));
    }
    for (path, value) in overrides {
        set_path(&mut user, path, value.clone());
    }
    let unknown = unknown_keys(&user);
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
    }
    let mut tree = serde_json::to_value(RunConfig::default())?;
    merge(&mut tree, user);
    let mut cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(seed) = cfg.seed {
        cfg.phantom.seed = seed;
        cfg.train.seed = seed;
        cfg.augment.seed = seed;
    }
    Ok(cfg)
}

pub fn read_config_file(path: &std::path::Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_resolve_without_input() {
        assert_eq!(resolve(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let user = json!({"train": {"epochz": 3, "batch_size": 2}, "bogus": 1, "model": {"backbone": {"nam": "x"}}});
        let err = resolve(Some(user), &[]).unwrap_err().to_string();
        for k in ["train.epochz", "bogus", "model.backbone.nam"] {
            assert!(err.contains(k), "{err}");
        }
        assert!(!err.contains("batch_size"));
    }

    #[test]
    fn optional_and_tagged_fields_are_known() {
        let user = json!({
            "data": {"manifest": "m.json"},
            "model": {"backbone": {"name": "tiny-test", "stage_channel_widths": [8, 16, 24, 32, 40]}},
            "phantom": {"layout": {"kind": "hemisphere_loss", "injected": "left", "injected_scale": 0.3}},
        });
        let cfg = resolve(Some(user), &[]).unwrap();
        assert_eq!(cfg.model.backbone.name, BackboneName::TinyTest);
        assert_eq!(cfg.data.manifest, Some(PathBuf::from("m.json")));
    }

    #[test]
    fn overrides_apply_in_order_and_parse_json() {
        let o = [
            parse_override("train.epochs=3").unwrap(),
            parse_override("train.epochs=7").unwrap(),
            parse_override("model.backbone.name=tiny-test").unwrap(),
            parse_override("sweep.image_sizes=[64,128]").unwrap(),
        ];
        let cfg = resolve(Some(json!({"train": {"batch_size": 2}})), &o).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.sweep.image_sizes, [64, 128]);
        assert!(resolve(None, &[parse_override("train.nope=1").unwrap()]).is_err());
        assert!(parse_override("train.epochs").is_err());
    }

    #[test]
    fn top_level_seed_reaches_sections() {
        let cfg = resolve(None, &[("seed".into(), json!(9))]).unwrap();
        assert_eq!((cfg.phantom.seed, cfg.train.seed, cfg.augment.seed), (9, 9, 9));
    }

    #[test]
    fn key_listing_covers_sections() {
        let k = keys(&["train"]);
        assert!(k.contains(&"train.learning_rate".to_string()));
        assert!(k.iter().all(|k| k.starts_with("train.")));
        assert!(keys(&["model"]).contains(&"model.backbone.pretrained_weights".to_string()));
        assert!(keys(&["seed"]).contains(&"seed".to_string()));
    }

    #[test]
    fn type_errors_are_config_errors() {
        let err = resolve(Some(json!({"train": {"epochs": "many"}})), &[]).unwrap_err();
        assert!(err.is_validation());
    }
}
