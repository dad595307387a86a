//! Embedding-as-mask head: `<SEG>` hidden state → `γ` → affinity with the
//! feature grid → full-resolution mask logits.

use crate::error::{Error, Result};
use crate::model::{DecoderKind, ModelBundle};
use crate::nn;
use crate::tensor::{stable_sigmoid, Tensor, TensorError};
use crate::text::{SpliceLayout, TokenSequence};
use crate::vision::FeatureMap;

/// `raw` is the `[1, d_model]` `<SEG>` hidden state; `projected` is its
/// `[1, d_s]` image under `γ`, set only by [`project_seg`].
#[derive(Debug, Clone)]
pub struct SegEmbedding {
    pub raw: Tensor,
    pub projected: Option<Tensor>,
}

/// Pre-sigmoid scores, `[H, W]`.
#[derive(Debug, Clone)]
pub struct MaskLogits {
    pub height: usize,
    pub width: usize,
    pub tensor: Tensor,
}

/// Row-major `H × W` mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(TensorError::ShapeMismatch(format!("{} values for a {height}x{width} mask", data.len())).into());
        }
        if let Some((offset, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NonBinaryMaskValue { value, offset });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, data: vec![value as u8; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn complement(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|v| 1 - v).collect() }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Hidden row of the first `<SEG>` token, mapped through the splice layout.
pub fn extract_seg_embedding(hidden: &Tensor, tokens: &TokenSequence, layout: &SpliceLayout) -> Result<SegEmbedding> {
    let pos = tokens.ids.iter().position(|&t| t == crate::text::SEG).ok_or(Error::NoSegToken)?;
    let row = layout.spliced_index(pos).ok_or(Error::NoSegToken)?;
    if hidden.shape().len() != 2 || hidden.shape()[0] != layout.spliced_len() {
        return Err(TensorError::ShapeMismatch(format!(
            "hidden {:?} for {} spliced positions",
            hidden.shape(),
            layout.spliced_len()
        ))
        .into());
    }
    Ok(SegEmbedding { raw: hidden.slice(0, row, row + 1)?, projected: None })
}

/// `γ`: `d_model → d_model → d_s` with GELU in between.
pub fn project_seg(bundle: &ModelBundle, seg: &SegEmbedding) -> Result<SegEmbedding> {
    let d = bundle.config.lm.d_model;
    if seg.raw.numel() != d {
        return Err(TensorError::ShapeMismatch(format!("SEG embedding {:?} vs d_model {d}", seg.raw.shape())).into());
    }
    let x = seg.raw.reshape(&[1, d])?;
    let h = nn::linear(bundle, "seg.gamma.fc1", &x)?.gelu()?;
    let q = nn::linear(bundle, "seg.gamma.fc2", &h)?;
    Ok(SegEmbedding { raw: seg.raw.clone(), projected: Some(q) })
}

/// Mask logits from `q = Q_seg` and the feature grid.
///
/// Per cell the keys are `k = f[i,j] · W_f + b_f` and the score is
/// `⟨q, k⟩ / √d_s`. With [`DecoderKind::Bilinear`] there is one key per
/// cell and the `h × w` score grid is bilinearly upsampled. With
/// [`DecoderKind::SubPixel`] each cell carries `p²` keys, one per pixel
/// offset inside its patch, and every pixel is scored directly.
pub fn decode_mask(bundle: &ModelBundle, q: &Tensor, f: &FeatureMap) -> Result<MaskLogits> {
    let v = &bundle.config.vision;
    let d_s = bundle.config.seg.d_s;
    if q.numel() != d_s {
        return Err(TensorError::ShapeMismatch(format!("query {:?} vs d_s {d_s}", q.shape())).into());
    }
    let (gh, gw) = (f.height, f.width);
    let (height, width) = (gh * v.patch_size, gw * v.patch_size);
    let p = &bundle.params;
    let (w_f, b_f) = (p.get("seg.decoder.w_f")?, p.get("seg.decoder.b_f")?);
    let q_col = q.reshape(&[d_s, 1])?;
    let inv = (d_s as f64).sqrt().recip();
    // Contract the keys with q before touching the feature map: (f·W + b)·q = f·(W·q) + b·q.
    let keys_per_cell = w_f.numel() / (v.d_v * d_s);
    let wq = w_f.reshape(&[v.d_v * keys_per_cell, d_s])?.matmul(&q_col)?.reshape(&[v.d_v, keys_per_cell])?;
    let bq = b_f.reshape(&[keys_per_cell, d_s])?.matmul(&q_col)?.reshape(&[keys_per_cell])?;
    let scores = f.tensor.matmul(&wq)?.add(&bq)?.scale(inv)?;
    let tensor = match bundle.config.seg.decoder {
        DecoderKind::Bilinear => scores.reshape(&[gh, gw])?.upsample_bilinear(height, width)?,
        DecoderKind::SubPixel => {
            let ps = v.patch_size;
            scores
                .reshape(&[gh * gw * ps * ps, 1])?
                .gather_rows(&subpixel_order(gh, gw, ps))?
                .reshape(&[height, width])?
        }
    };
    Ok(MaskLogits { height, width, tensor })
}

/// Source row (cell-major, then in-patch offset) for each output pixel.
fn subpixel_order(gh: usize, gw: usize, p: usize) -> Vec<usize> {
    let width = gw * p;
    (0..gh * p * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            ((y / p) * gw + x / p) * p * p + (y % p) * p + x % p
        })
        .collect()
}

/// Pixel is 1 iff `sigmoid(logit) >= tau`.
pub fn binarize(logits: &MaskLogits, tau: f64) -> Result<BinaryMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::BadThreshold(tau));
    }
    let data = logits.tensor.data().iter().map(|&z| (stable_sigmoid(z) >= tau) as u8).collect();
    BinaryMask::new(logits.height, logits.width, data)
}
