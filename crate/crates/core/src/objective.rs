//! Text and mask losses, their weighted combination, and mask metrics.
//!
//! All reductions are means so magnitudes do not depend on resolution or
//! answer length.

use crate::error::{Error, Result};
use crate::seg::{BinaryMask, MaskLogits};
use crate::tensor::{Tensor, TensorError};
use crate::text::{SpliceLayout, TokenSequence};

pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub text: f64,
    pub mask: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { text: 0.8, mask: 0.8, bce: 2.0, dice: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("text", self.text), ("mask", self.mask), ("bce", self.bce), ("dice", self.dice)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidWeights(format!("{name} weight {w}")));
            }
        }
        Ok(())
    }
}

fn check_dims(logits: &MaskLogits, target: &BinaryMask) -> Result<()> {
    if logits.height != target.height || logits.width != target.width || logits.tensor.numel() != target.data.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "logits {}x{} vs target {}x{}",
            logits.height, logits.width, target.height, target.width
        ))
        .into());
    }
    Ok(())
}

/// Mean next-token cross-entropy over supervised positions: token `i` is
/// predicted from the logits one spliced row before it.
pub fn text_loss(logits: &Tensor, tokens: &TokenSequence, layout: &SpliceLayout) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, (&id, &sup)) in tokens.ids.iter().zip(&tokens.supervise).enumerate() {
        if !sup {
            continue;
        }
        match layout.spliced_index(i) {
            Some(r) if r > 0 => {
                rows.push(r - 1);
                targets.push(id);
            }
            _ => return Err(Error::NoSupervisedPositions),
        }
    }
    if rows.is_empty() {
        return Err(Error::NoSupervisedPositions);
    }
    Ok(logits.gather_rows(&rows)?.log_softmax()?.pick(&targets)?.mean()?.scale(-1.0)?)
}

/// Mean of `max(z, 0) - z·t + ln(1 + e^{-|z|})`.
pub fn bce_loss(logits: &MaskLogits, target: &BinaryMask) -> Result<Tensor> {
    check_dims(logits, target)?;
    Ok(logits.tensor.bce_with_logits(&target.as_f64())?.mean()?)
}

/// `1 - (2 Σ p·t + ε) / (Σ p + Σ t + ε)` with `p = σ(z)`.
pub fn dice_loss(logits: &MaskLogits, target: &BinaryMask, eps: f64) -> Result<Tensor> {
    check_dims(logits, target)?;
    if !(eps > 0.0) {
        return Err(Error::InvalidWeights(format!("dice smoothing {eps}")));
    }
    let t = Tensor::new(logits.tensor.shape(), target.as_f64())?;
    let p = logits.tensor.sigmoid()?;
    let num = p.mul(&t)?.sum()?.scale(2.0)?.add_scalar(eps)?;
    let den = p.sum()?.add_scalar(target.count_ones() as f64 + eps)?;
    Ok(num.div(&den)?.scale(-1.0)?.add_scalar(1.0)?)
}

/// `θ_bce · BCE + θ_dice · Dice`.
pub fn mask_loss(logits: &MaskLogits, target: &BinaryMask, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    let bce = bce_loss(logits, target)?;
    let dice = dice_loss(logits, target, DICE_EPS)?;
    Ok(bce.scale(w.bce)?.add(&dice.scale(w.dice)?)?)
}

/// `θ_t · L_t + θ_m · L_m`.
pub fn total_loss(l_t: &Tensor, l_m: &Tensor, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    if !l_t.item()?.is_finite() {
        return Err(Error::NonFinite("text loss"));
    }
    if !l_m.item()?.is_finite() {
        return Err(Error::NonFinite("mask loss"));
    }
    Ok(l_t.scale(w.text)?.add(&l_m.scale(w.mask)?)?)
}

/// IoU per class for one prediction; `None` marks a class absent from both masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassIou {
    pub window: Option<f64>,
    pub wall: Option<f64>,
    pub miou: f64,
}

fn same_dims(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(TensorError::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        ))
        .into());
    }
    Ok(())
}

/// Window IoU on the masks, wall IoU on their complements; classes empty in
/// both masks are left out of the mean.
pub fn miou(pred: &BinaryMask, gt: &BinaryMask) -> Result<ClassIou> {
    same_dims(pred, gt)?;
    // Confusion counts [gt][pred].
    let mut c = [[0usize; 2]; 2];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        c[g as usize][p as usize] += 1;
    }
    let iou = |k: usize| {
        let union = c[k][0] + c[k][1] + c[1 - k][k];
        (union > 0).then(|| c[k][k] as f64 / union as f64)
    };
    let (window, wall) = (iou(1), iou(0));
    let present: Vec<f64> = [window, wall].into_iter().flatten().collect();
    let miou = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(ClassIou { window, wall, miou })
}

pub fn pixel_accuracy(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_dims(pred, gt)?;
    let hits = pred.data.iter().zip(&gt.data).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gt.data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub iou: ClassIou,
    pub pa: f64,
}

pub fn sample_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<SampleMetrics> {
    Ok(SampleMetrics { iou: miou(pred, gt)?, pa: pixel_accuracy(pred, gt)? })
}

/// Aggregate over samples: per-class IoU averaged over the samples where the
/// class is present, mIoU and PA averaged over all samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub iou_window: Option<f64>,
    pub iou_wall: Option<f64>,
    pub miou: f64,
    pub pa: f64,
    pub samples: usize,
}

impl MetricsReport {
    pub fn from_samples(samples: &[SampleMetrics]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len() as f64;
        let avg = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        Some(Self {
            iou_window: avg(samples.iter().filter_map(|s| s.iou.window).collect()),
            iou_wall: avg(samples.iter().filter_map(|s| s.iou.wall).collect()),
            miou: samples.iter().map(|s| s.iou.miou).sum::<f64>() / n,
            pa: samples.iter().map(|s| s.pa).sum::<f64>() / n,
            samples: samples.len(),
        })
    }
}
