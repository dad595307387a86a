//! Frozen patch encoder and the trainable vision→LM projector.

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn;
use crate::tensor::{Tensor, TensorError};

/// `H × W × 3` image, channels-last, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::MalformedImage(format!("{} values for a {height}x{width}x3 image", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::MalformedImage(format!("channel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

/// `h × w × d_v` grid stored as a `[h·w, d_v]` tensor, cells in row-major order.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub tensor: Tensor,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, tensor: Tensor) -> Result<Self> {
        match tensor.shape() {
            [n, _] if *n == height * width => Ok(Self { height, width, tensor }),
            s => Err(TensorError::ShapeMismatch(format!("{s:?} for a {height}x{width} grid")).into()),
        }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    /// A constant copy that carries no graph.
    pub fn detach(&self) -> Self {
        Self { height: self.height, width: self.width, tensor: self.tensor.detach() }
    }
}

fn check_divisible(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::NonDivisibleDims { height, width, patch });
    }
    Ok(())
}

/// Row `k` holds patch `(k / w, k % w)`, flattened as `(dy, dx, channel)`.
pub fn patchify(image: &ImageTensor, p: usize) -> Result<Tensor> {
    check_divisible(image.height, image.width, p)?;
    let (gh, gw) = (image.height / p, image.width / p);
    let row = p * p * 3;
    let mut out = Vec::with_capacity(gh * gw * row);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                let start = ((gy * p + dy) * image.width + gx * p) * 3;
                out.extend_from_slice(&image.data[start..start + p * 3]);
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, row], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, p: usize) -> Result<ImageTensor> {
    check_divisible(height, width, p)?;
    let (gh, gw) = (height / p, width / p);
    if patches.shape() != [gh * gw, p * p * 3] {
        return Err(TensorError::ShapeMismatch(format!("{:?} patches for {height}x{width}", patches.shape())).into());
    }
    let src = patches.data();
    let mut data = vec![0.0; height * width * 3];
    for gy in 0..gh {
        for gx in 0..gw {
            let k = gy * gw + gx;
            for dy in 0..p {
                let dst = ((gy * p + dy) * width + gx * p) * 3;
                let s = k * p * p * 3 + dy * p * 3;
                data[dst..dst + p * 3].copy_from_slice(&src[s..s + p * 3]);
            }
        }
    }
    ImageTensor::new(height, width, data)
}

/// Patch embedding, learned positions and bidirectional blocks.
pub fn encode(bundle: &ModelBundle, image: &ImageTensor) -> Result<FeatureMap> {
    let v = &bundle.config.vision;
    if image.height != v.image_height || image.width != v.image_width {
        return Err(Error::DimsMismatch {
            expected_h: v.image_height,
            expected_w: v.image_width,
            got_h: image.height,
            got_w: image.width,
        });
    }
    let patches = patchify(image, v.patch_size)?;
    let mut x = nn::linear(bundle, "vision.encoder.patch_embed", &patches)?;
    x = x.add(bundle.params.get("vision.encoder.pos_embed")?)?;
    for b in 0..v.n_blocks {
        x = nn::block(bundle, &format!("vision.encoder.blocks.{b}"), &x, v.n_heads, false)?;
    }
    let (h, w) = v.grid();
    FeatureMap::new(h, w, x)
}

/// Per-cell affine map `d_v → d_model`, one image token per cell in row-major order.
pub fn project_to_lm(bundle: &ModelBundle, f: &FeatureMap) -> Result<Tensor> {
    if f.channels() != bundle.config.vision.d_v {
        return Err(TensorError::ShapeMismatch(format!(
            "feature channels {} vs d_v {}",
            f.channels(),
            bundle.config.vision.d_v
        ))
        .into());
    }
    nn::linear(bundle, "vision.projector", &f.tensor)
}
