//! Overlap losses. The `f64` functions work on [`ProbabilityMap`]s; the tensor
//! functions take logits and target one-hot tensors shaped `[B, C, H, W]` and
//! pool all pixels of the batch before taking ratios.

use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::ProbabilityMap;

pub const DEFAULT_SMOOTH: f64 = 1e-6;

/// Probabilities are clamped here before taking logs.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Dice,
    Jaccard,
    CategoricalCrossEntropy,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Dice, LossKind::Jaccard, LossKind::CategoricalCrossEntropy];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::Jaccard => "jaccard",
            LossKind::CategoricalCrossEntropy => "categorical_cross_entropy",
        }
    }

    pub fn eval(self, y: &ProbabilityMap, y_hat: &ProbabilityMap, smooth: f64) -> Result<f64> {
        match self {
            LossKind::Dice => dice_loss(y, y_hat, smooth),
            LossKind::Jaccard => jaccard_loss(y, y_hat, smooth),
            LossKind::CategoricalCrossEntropy => cross_entropy(y, y_hat),
        }
    }

    /// Scalar loss tensor from `[B, C, H, W]` logits and one-hot targets.
    pub fn tensor_loss(self, logits: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
        check_tensor_shapes(logits, target)?;
        let target = target.to_dtype(logits.dtype())?;
        Ok(match self {
            LossKind::Dice => {
                let probs = candle_nn::ops::softmax(logits, 1)?;
                let (inter, py, pp) = overlap_sums(&probs, &target)?;
                let ratio = (inter.affine(2.0, smooth)? / (py + pp)?.affine(1.0, smooth)?)?;
                ratio.mean_all()?.affine(-1.0, 1.0)?
            }
            LossKind::Jaccard => {
                let probs = candle_nn::ops::softmax(logits, 1)?;
                let (inter, py, pp) = overlap_sums(&probs, &target)?;
                let union = ((py + pp)? - &inter)?;
                let ratio = (inter.affine(1.0, smooth)? / union.affine(1.0, smooth)?)?;
                ratio.mean_all()?.affine(-1.0, 1.0)?
            }
            LossKind::CategoricalCrossEntropy => {
                let logp = candle_nn::ops::log_softmax(logits, 1)?;
                (logp * target)?.sum(1)?.mean_all()?.neg()?
            }
        })
    }
}

impl FromStr for LossKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid!("unknown loss {s:?}; expected dice, jaccard or categorical_cross_entropy"))
    }
}

fn check_tensor_shapes(logits: &Tensor, target: &Tensor) -> Result<()> {
    if logits.dims() != target.dims() || logits.rank() != 4 {
        return Err(invalid!(
            "loss expects matching [B, C, H, W] tensors, got {:?} and {:?}",
            logits.dims(),
            target.dims()
        ));
    }
    if logits.dim(1)? < 2 {
        return Err(invalid!("loss needs at least one foreground class"));
    }
    Ok(())
}

/// Per-foreground-class `(Σyŷ, Σy, Σŷ)` over batch and pixels.
fn overlap_sums(probs: &Tensor, target: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let c = probs.dim(1)?;
    let p = probs.narrow(1, 1, c - 1)?;
    let y = target.narrow(1, 1, c - 1)?;
    let sum = |t: &Tensor| -> candle_core::Result<Tensor> { t.sum((0, 2, 3)) };
    Ok((sum(&(&p * &y)?)?, sum(&y)?, sum(&p)?))
}

/// Convenience for tests and tools: one-hot target tensor from class ids.
pub fn one_hot_tensor(labels: &Tensor, classes: usize) -> Result<Tensor> {
    // labels: [B, H, W] u32
    let labels = labels.to_dtype(DType::U32)?.unsqueeze(1)?;
    let ids = Tensor::arange(0u32, classes as u32, labels.device())?.reshape((1, classes, 1, 1))?;
    Ok(labels.broadcast_eq(&ids)?.to_dtype(DType::F32)?)
}

fn check_pair(y: &ProbabilityMap, y_hat: &ProbabilityMap) -> Result<()> {
    if (y.width(), y.height(), y.classes()) != (y_hat.width(), y_hat.height(), y_hat.classes()) {
        return Err(invalid!(
            "target is {}x{}x{} but prediction is {}x{}x{}",
            y.width(),
            y.height(),
            y.classes(),
            y_hat.width(),
            y_hat.height(),
            y_hat.classes()
        ));
    }
    if y.classes() < 2 {
        return Err(invalid!("loss needs at least one foreground class"));
    }
    for (i, px) in y.pixels().enumerate() {
        if px.iter().any(|&v| v != 0.0 && v != 1.0) || px.iter().sum::<f64>() != 1.0 {
            return Err(invalid!("target pixel {i} is not one-hot: {px:?}"));
        }
    }
    Ok(())
}

fn class_sums(y: &ProbabilityMap, y_hat: &ProbabilityMap) -> Vec<(f64, f64, f64)> {
    let c = y.classes();
    let mut s = vec![(0.0, 0.0, 0.0); c];
    for (py, pp) in y.pixels().zip(y_hat.pixels()) {
        for k in 1..c {
            s[k].0 += py[k] * pp[k];
            s[k].1 += py[k];
            s[k].2 += pp[k];
        }
    }
    s.remove(0);
    s
}

/// Soft Dice ratio for every foreground class, in class order starting at 1.
pub fn soft_dice_per_class(y: &ProbabilityMap, y_hat: &ProbabilityMap, smooth: f64) -> Result<Vec<f64>> {
    check_pair(y, y_hat)?;
    Ok(class_sums(y, y_hat)
        .into_iter()
        .map(|(i, a, b)| (2.0 * i + smooth) / (a + b + smooth))
        .collect())
}

/// `1 - mean_k (2Σyŷ + s) / (Σy + Σŷ + s)` over foreground classes.
pub fn dice_loss(y: &ProbabilityMap, y_hat: &ProbabilityMap, smooth: f64) -> Result<f64> {
    let d = soft_dice_per_class(y, y_hat, smooth)?;
    Ok(1.0 - d.iter().sum::<f64>() / d.len() as f64)
}

pub fn jaccard_loss(y: &ProbabilityMap, y_hat: &ProbabilityMap, smooth: f64) -> Result<f64> {
    check_pair(y, y_hat)?;
    let s = class_sums(y, y_hat);
    let mean = s.iter().map(|&(i, a, b)| (i + smooth) / (a + b - i + smooth)).sum::<f64>() / s.len() as f64;
    Ok(1.0 - mean)
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy(y: &ProbabilityMap, y_hat: &ProbabilityMap) -> Result<f64> {
    check_pair(y, y_hat)?;
    let n = y.pixel_count();
    let total: f64 = y
        .pixels()
        .zip(y_hat.pixels())
        .map(|(py, pp)| {
            let k = py.iter().position(|&v| v == 1.0).expect("checked one-hot");
            -pp[k].max(LOG_FLOOR).ln()
        })
        .sum();
    Ok(total / n as f64)
}
