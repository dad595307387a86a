use crate::data::LoadedSample;
use crate::error::Result;
use crate::model::ModelBundle;
use crate::objective::{mask_loss, text_loss, total_loss, LossWeights};
use crate::seg::{decode_mask, extract_seg_embedding, project_seg, BinaryMask, MaskLogits};
use crate::tensor::{no_grad, Tensor};
use crate::text::{lm_forward, TokenSequence};
use crate::vision::{encode, project_to_lm, FeatureMap};

/// One teacher-forced example with encoder features already computed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub tokens: TokenSequence,
    pub features: FeatureMap,
    pub mask: BinaryMask,
}

impl PreparedSample {
    /// Encodes the image once; the encoder is frozen, so the features are constants.
    pub fn new(bundle: &ModelBundle, sample: &LoadedSample) -> Result<Self> {
        let features = no_grad(|| encode(bundle, &sample.image))?.detach();
        Ok(Self { tokens: sample.sample.tokens()?, features, mask: sample.mask.clone() })
    }
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub text: Tensor,
    pub mask: Tensor,
    pub total: Tensor,
}

/// Mask logits at the first `<SEG>` of `tokens`, plus the LM logits.
pub fn seg_logits(
    bundle: &ModelBundle,
    tokens: &TokenSequence,
    features: &FeatureMap,
) -> Result<(MaskLogits, crate::text::LmOutput)> {
    let image_tokens = project_to_lm(bundle, features)?;
    let out = lm_forward(bundle, tokens, Some(&image_tokens))?;
    let seg = extract_seg_embedding(&out.hidden, tokens, &out.layout)?;
    let q = project_seg(bundle, &seg)?.projected.expect("project_seg sets the projection");
    Ok((decode_mask(bundle, &q, features)?, out))
}

/// `L_t`, `L_m` and the weighted total for one sample.
pub fn sample_loss(
    bundle: &ModelBundle,
    sample: &PreparedSample,
    weights: &LossWeights,
) -> Result<(LossParts, MaskLogits)> {
    let (logits, out) = seg_logits(bundle, &sample.tokens, &sample.features)?;
    let text = text_loss(&out.logits, &sample.tokens, &out.layout)?;
    let mask = mask_loss(&logits, &sample.mask, weights)?;
    let total = total_loss(&text, &mask, weights)?;
    Ok((LossParts { text, mask, total }, logits))
}
