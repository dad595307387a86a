//! Layers shared by the language model and the vision encoder.

use crate::error::Result;
use crate::model::ModelBundle;
use crate::tensor::Tensor;

pub(crate) const LN_EPS: f64 = 1e-5;

/// `x · W + b` for the parameter pair `<name>.weight` / `<name>.bias`, plus
/// the low-rank delta when an adapter targets `<name>.weight`.
pub(crate) fn linear(bundle: &ModelBundle, name: &str, x: &Tensor) -> Result<Tensor> {
    let target = format!("{name}.weight");
    let p = &bundle.params;
    let mut y = x.matmul(p.get(&target)?)?;
    if let Some(adapter) = bundle.adapter_for(&target) {
        let a = p.get(&adapter.a_name())?;
        let b = p.get(&adapter.b_name())?;
        let delta = x.matmul(&a.transpose()?)?.matmul(&b.transpose()?)?;
        y = y.add(&delta.scale(adapter.scale())?)?;
    }
    let bias = format!("{name}.bias");
    if p.contains(&bias) {
        y = y.add(p.get(&bias)?)?;
    }
    Ok(y)
}

pub(crate) fn norm(bundle: &ModelBundle, name: &str, x: &Tensor) -> Result<Tensor> {
    let p = &bundle.params;
    Ok(x.layer_norm(p.get(&format!("{name}.gain"))?, p.get(&format!("{name}.bias"))?, LN_EPS)?)
}

fn attention(bundle: &ModelBundle, prefix: &str, x: &Tensor, n_heads: usize, causal: bool) -> Result<Tensor> {
    let q = linear(bundle, &format!("{prefix}.wq"), x)?;
    let k = linear(bundle, &format!("{prefix}.wk"), x)?;
    let v = linear(bundle, &format!("{prefix}.wv"), x)?;
    let merged = Tensor::attention(&q, &k, &v, n_heads, causal)?;
    linear(bundle, &format!("{prefix}.wo"), &merged)
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
/// With `causal`, position `i` attends to positions `0..=i` only.
pub(crate) fn block(bundle: &ModelBundle, prefix: &str, x: &Tensor, n_heads: usize, causal: bool) -> Result<Tensor> {
    let h = norm(bundle, &format!("{prefix}.attn_norm"), x)?;
    let x = x.add(&attention(bundle, &format!("{prefix}.attn"), &h, n_heads, causal)?)?;
    let h = norm(bundle, &format!("{prefix}.mlp_norm"), &x)?;
    let h = linear(bundle, &format!("{prefix}.mlp.fc1"), &h)?.gelu()?;
    let h = linear(bundle, &format!("{prefix}.mlp.fc2"), &h)?;
    Ok(x.add(&h)?)
}
