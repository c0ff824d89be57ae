use std::path::Path;
use std::process::{Command, Output};

use nigra_core::{io, ClassCounts, Split};

fn nigra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nigra"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "model": {"backbone": {"name": "tiny-test"}, "input_size": 64, "decoder_channel_widths": [32, 24, 16, 8, 8]},
  "train": {"batch_size": 2}
}"#;

#[test]
fn generate_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = nigra(&["generate", "--n", "10", "--size", "128", "--seed", "7", "--out", &s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = io::read_manifest(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.len(), 10);
    for e in &manifest {
        let img = io::read_image(&out.join(&e.image_path)).unwrap();
        assert_eq!((img.width(), img.height()), (128, 128));
        assert!(out.join(&e.mask_path).is_file());
    }
    let run: serde_json::Value = io::read_json(&out.join("run.json")).unwrap();
    assert_eq!(run["seeds"]["phantom"], 7);
    assert_eq!(run["config"]["phantom"]["n_samples"], 10);
}

#[test]
fn empty_validation_split_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    // three samples leave no room for a validation split
    assert!(nigra(&["generate", "--n", "3", "--size", "64", "--out", &s(&data)]).status.success());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let o = nigra(&[
        "train", "--config", &s(&cfg), "--manifest", &s(&data.join("manifest.json")), "--out", &s(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("val split"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_listed_and_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochz": 2, "lr": 0.1}, "extra": true}"#).unwrap();
    let o = nigra(&["generate", "--config", &s(&cfg), "--out", &s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for k in ["train.epochz", "train.lr", "extra"] {
        assert!(err.contains(k), "{err}");
    }
    let o = nigra(&["generate", "--set", "phantom.sizee=3", "--out", &s(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_usage_and_invalid_values_exit_one() {
    assert_eq!(nigra(&["train", "--no-such-flag"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let o = nigra(&["generate", "--size", "0", "--out", &s(dir.path())]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = nigra(&["eval", "--checkpoint", &s(&dir.path().join("none")), "--out", &s(dir.path())]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    std::fs::create_dir_all(&ckpt).unwrap();
    std::fs::write(ckpt.join("config.json"), "{ not json").unwrap();
    let data = dir.path().join("data");
    assert!(nigra(&["generate", "--n", "10", "--size", "64", "--out", &s(&data)]).status.success());
    let o = nigra(&[
        "eval", "--checkpoint", &s(&ckpt), "--manifest", &s(&data.join("manifest.json")), "--out", &s(&dir.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn help_lists_config_keys() {
    let o = nigra(&["train", "--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for k in ["train.learning_rate", "train.early_stop_patience", "model.backbone.name", "augment.elastic_p", "data.manifest"] {
        assert!(text.contains(k), "missing {k}");
    }
    let o = nigra(&["quantify", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("stain.blue_norm_threshold") && text.contains("quantify.hemispheres"));
}

/// Per-image mean dice over foreground classes with undefined classes skipped,
/// then the mean over images, tallied pixel by pixel.
fn brute_mean_dice(pairs: &[(Vec<u8>, Vec<u8>)]) -> f64 {
    let mut per_image = Vec::new();
    for (pred, truth) in pairs {
        let mut ds = Vec::new();
        for class in [1u8, 2] {
            let mut c = ClassCounts::default();
            for (&p, &t) in pred.iter().zip(truth) {
                match (p == class, t == class) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
            let denom = 2 * c.tp + c.fp + c.fn_;
            if denom > 0 {
                ds.push(2.0 * c.tp as f64 / denom as f64);
            }
        }
        if !ds.is_empty() {
            per_image.push(ds.iter().sum::<f64>() / ds.len() as f64);
        }
    }
    per_image.iter().sum::<f64>() / per_image.len() as f64
}

#[test]
fn eval_mean_dice_matches_brute_force_over_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = data.join("manifest.json");
    assert!(nigra(&["generate", "--n", "20", "--size", "64", "--seed", "3", "--out", &s(&data)]).status.success());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let o = nigra(&["train", "--config", &s(&cfg), "--manifest", &s(&manifest), "--epochs", "2", "--out", &s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run.join("best");
    let ev = dir.path().join("eval");
    let o = nigra(&["eval", "--checkpoint", &s(&ckpt), "--manifest", &s(&manifest), "--split", "test", "--out", &s(&ev)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pred = dir.path().join("pred");
    let o = nigra(&["predict", "--checkpoint", &s(&ckpt), "--input", &s(&data.join("images")), "--out", &s(&pred)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let entries = io::read_manifest(&manifest).unwrap();
    let pairs: Vec<(Vec<u8>, Vec<u8>)> = io::samples_in(&entries, Split::Test)
        .into_iter()
        .map(|e| {
            let p = io::read_mask(&pred.join("masks").join(format!("{}.png", e.sample_id))).unwrap();
            let t = io::read_mask(&data.join(&e.mask_path)).unwrap();
            (p.data().to_vec(), t.data().to_vec())
        })
        .collect();
    assert_eq!(pairs.len(), 2);
    let mut rdr = csv::Reader::from_path(ev.join("metrics.csv")).unwrap();
    let mean_row = rdr.records().map(|r| r.unwrap()).find(|r| &r[0] == "mean").unwrap();
    let dice: f64 = mean_row[2].parse().unwrap();
    let want = brute_mean_dice(&pairs);
    assert!((dice - want).abs() < 1e-8, "{dice} vs {want}");
}

#[test]
fn quantify_correlate_report_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = data.join("manifest.json");
    let o = nigra(&[
        "generate", "--n", "10", "--size", "64", "--set", "phantom.th_scale_spread=0.6", "--out", &s(&data),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let q = dir.path().join("q");
    let o = nigra(&["quantify", "--manifest", &s(&manifest), "--split", "train", "--set", "quantify.overlays=true", "--out", &s(&q)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = nigra_core::quantify::read_od_csv(&q.join("od.csv")).unwrap();
    assert_eq!(rows.len(), 8 * 2);
    assert!(q.join("overlays").read_dir().unwrap().count() == 8);

    // gt-only table: correlation cannot pair anything
    let o = nigra(&["correlate", "--od", &s(&q.join("od.csv")), "--out", &s(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let r = dir.path().join("r");
    let o = nigra(&["report", "--od", &s(&q.join("od.csv")), "--out", &s(&r)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: serde_json::Value = io::read_json(&r.join("report.json")).unwrap();
    let missing: Vec<String> = serde_json::from_value(rep["missing"].clone()).unwrap();
    assert!(missing.iter().any(|m| m == "metrics.with_et"));
    assert!(missing.iter().any(|m| m.starts_with("correlation.pooled")));
}

#[test]
fn preview_writes_variants_and_montages() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(nigra(&["generate", "--n", "2", "--size", "64", "--out", &s(&data)]).status.success());
    let out = dir.path().join("prev");
    let o = nigra(&[
        "preview-aug", "--image", &s(&data.join("images/phantom_0000.png")), "--mask", &s(&data.join("masks/phantom_0000.png")),
        "--n", "7", "--set", "preview.mode=each_transform", "--out", &s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("montage.png").is_file() && out.join("mask_montage.png").is_file());
    assert!(out.join("05_elastic.png").is_file());
}
