use super::tokenizer::{TokenSequence, EOS, IMG, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn;
use crate::tensor::{no_grad, Tensor};

/// Maps token positions to positions in the spliced sequence.
///
/// With the `<IMG>` placeholder at token index `p` replaced by `n` image
/// tokens, token `i < p` stays at `i` and token `i > p` moves to `i + n - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpliceLayout {
    pub img_position: Option<usize>,
    pub n_image: usize,
    pub token_len: usize,
}

impl SpliceLayout {
    pub fn spliced_len(&self) -> usize {
        match self.img_position {
            Some(_) => self.token_len + self.n_image - 1,
            None => self.token_len,
        }
    }

    /// Spliced index of token `i`; `None` for the placeholder itself.
    pub fn spliced_index(&self, i: usize) -> Option<usize> {
        match self.img_position {
            Some(p) if i == p => None,
            Some(p) if i > p => Some(i + self.n_image - 1),
            _ => Some(i),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutput {
    /// Final-layer hidden states after the closing layer norm, `[T, d_model]`.
    pub hidden: Tensor,
    /// `[T, vocab]`.
    pub logits: Tensor,
    pub layout: SpliceLayout,
}

/// Causal forward pass over `tokens` with `image_tokens` (`[n, d_model]`)
/// spliced in at the single `<IMG>` placeholder.
pub fn lm_forward(bundle: &ModelBundle, tokens: &TokenSequence, image_tokens: Option<&Tensor>) -> Result<LmOutput> {
    let (mut x, layout) = lm_embed(bundle, tokens, image_tokens)?;
    for l in 0..bundle.config.lm.n_layers {
        x = lm_layer(bundle, l, &x)?;
    }
    lm_head(bundle, &x, layout)
}

/// Spliced input embeddings plus positions, `[T, d_model]`.
pub(crate) fn lm_embed(
    bundle: &ModelBundle,
    tokens: &TokenSequence,
    image_tokens: Option<&Tensor>,
) -> Result<(Tensor, SpliceLayout)> {
    let cfg = &bundle.config.lm;
    let p = &bundle.params;
    if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= VOCAB_SIZE) {
        return Err(Error::IdOutOfRange(bad));
    }
    if tokens.is_empty() {
        return Err(Error::SequenceTooLong { len: 0, max: cfg.max_seq_len });
    }
    let image_tokens = image_tokens.filter(|t| t.numel() > 0);
    let img_position = match image_tokens {
        None => None,
        Some(_) => match tokens.count(IMG) {
            0 => return Err(Error::MissingImgPlaceholder),
            1 => tokens.ids.iter().position(|&t| t == IMG),
            n => return Err(Error::MultipleImgPlaceholders(n)),
        },
    };
    let n_image = image_tokens.map_or(0, |t| t.shape()[0]);
    let layout = SpliceLayout { img_position, n_image, token_len: tokens.len() };
    let t = layout.spliced_len();
    if t > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: t, max: cfg.max_seq_len });
    }

    let embedded = p.get("lm.embed_tokens")?.gather_rows(&tokens.ids)?;
    let x = match (img_position, image_tokens) {
        (Some(ip), Some(img)) => {
            let mut parts = Vec::with_capacity(3);
            if ip > 0 {
                parts.push(embedded.slice(0, 0, ip)?);
            }
            parts.push(img.clone());
            if ip + 1 < tokens.len() {
                parts.push(embedded.slice(0, ip + 1, tokens.len())?);
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            Tensor::concat(&refs, 0)?
        }
        _ => embedded,
    };
    Ok((x.add(&p.get("lm.pos_embed")?.slice(0, 0, t)?)?, layout))
}

/// Causal decoder layer `l`.
pub(crate) fn lm_layer(bundle: &ModelBundle, l: usize, x: &Tensor) -> Result<Tensor> {
    nn::block(bundle, &format!("lm.layers.{l}"), x, bundle.config.lm.n_heads, true)
}

/// Final norm and vocabulary projection.
pub(crate) fn lm_head(bundle: &ModelBundle, x: &Tensor, layout: SpliceLayout) -> Result<LmOutput> {
    let hidden = nn::norm(bundle, "lm.final_norm", x)?;
    let logits = hidden.matmul(bundle.params.get("lm.lm_head.weight")?)?;
    Ok(LmOutput { hidden, logits, layout })
}

/// Folds every adapter into its target weight and drops the adapters.
pub fn lora_merge(bundle: &ModelBundle) -> Result<ModelBundle> {
    let mut merged = bundle.clone();
    for adapter in &bundle.adapters {
        let w = bundle.params.get(&adapter.target).map_err(|_| Error::TargetNotFound(adapter.target.clone()))?;
        let a = bundle.params.get(&adapter.a_name())?;
        let b = bundle.params.get(&adapter.b_name())?;
        // W is stored [d_in, d_out], so the delta is (B·A)ᵀ = Aᵀ·Bᵀ.
        let delta = no_grad(|| a.transpose()?.matmul(&b.transpose()?))?;
        if delta.shape() != w.shape() {
            return Err(crate::tensor::TensorError::ShapeMismatch(format!(
                "adapter delta {:?} vs target {:?}",
                delta.shape(),
                w.shape()
            ))
            .into());
        }
        let s = adapter.scale();
        let values = w.data().iter().zip(delta.data()).map(|(w, d)| w + s * d).collect();
        merged.params.set_data(&adapter.target, values)?;
        merged.params.remove(&adapter.a_name())?;
        merged.params.remove(&adapter.b_name())?;
    }
    merged.adapters.clear();
    Ok(merged)
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Appends argmax tokens to `prompt` until `<EOS>` (not appended) or
/// `max_new` tokens. Generated positions are not supervised.
pub fn greedy_decode(
    bundle: &ModelBundle,
    prompt: &TokenSequence,
    image_tokens: Option<&Tensor>,
    max_new: usize,
) -> Result<TokenSequence> {
    no_grad(|| {
        let mut seq = prompt.clone();
        let vocab = bundle.config.lm.vocab_size;
        for _ in 0..max_new {
            let out = lm_forward(bundle, &seq, image_tokens)?;
            let last = out.layout.spliced_len() - 1;
            let next = argmax(&out.logits.data()[last * vocab..(last + 1) * vocab]);
            if next == EOS {
                break;
            }
            seq.push(next, false);
        }
        Ok(seq)
    })
}
