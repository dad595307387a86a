//! Model dimensions, parameter layout and the [`ModelBundle`] that owns them.
//!
//! Linear weights are stored `[d_in, d_out]` so a layer is `x · W + b`.
//! The trainable set is fixed by construction: LoRA adapters, the token
//! embedding table, the output head, the vision→LM projector, the `<SEG>`
//! projection MLP and the mask decoder. Everything else (LM base weights,
//! positional tables, norms and the whole vision encoder) is frozen.

use crate::error::{Error, Result};
use crate::tensor::ParamRegistry;
use crate::text::VOCAB_SIZE;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { n_layers: 2, d_model: 64, n_heads: 4, max_seq_len: 256, vocab_size: VOCAB_SIZE }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self { image_height: 64, image_width: 64, patch_size: 8, d_v: 64, n_blocks: 2, n_heads: 4 }
    }
}

impl VisionConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn n_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

/// How the mask decoder turns the per-cell affinity keys into full-resolution logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderKind {
    /// A learned key per in-patch pixel offset (`W_f` is `[d_v, p·p·d_s]`);
    /// each pixel's logit is the affinity of `Q_seg` with its own key.
    #[default]
    SubPixel,
    /// One key per cell (`W_f` is `[d_v, d_s]`); the cell score grid is
    /// bilinearly upsampled to the image size.
    Bilinear,
}

impl DecoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecoderKind::SubPixel => "subpixel",
            DecoderKind::Bilinear => "bilinear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "subpixel" => Some(DecoderKind::SubPixel),
            "bilinear" => Some(DecoderKind::Bilinear),
            _ => None,
        }
    }

    fn code(&self) -> u64 {
        match self {
            DecoderKind::SubPixel => 0,
            DecoderKind::Bilinear => 1,
        }
    }

    fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(DecoderKind::SubPixel),
            1 => Some(DecoderKind::Bilinear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegConfig {
    pub d_s: usize,
    pub decoder: DecoderKind,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self { d_s: 32, decoder: DecoderKind::SubPixel }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub lm: LmConfig,
    pub vision: VisionConfig,
    pub seg: SegConfig,
    pub lora: LoraConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let lm = &self.lm;
        if [lm.n_layers, lm.d_model, lm.n_heads, lm.max_seq_len, lm.vocab_size].contains(&0) {
            return bad("LM dimensions must be positive".into());
        }
        if !lm.d_model.is_multiple_of(lm.n_heads) {
            return bad(format!("d_model {} not divisible by {} heads", lm.d_model, lm.n_heads));
        }
        if lm.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE}"));
        }
        let v = &self.vision;
        if [v.image_height, v.image_width, v.patch_size, v.d_v, v.n_blocks, v.n_heads].contains(&0) {
            return bad("vision dimensions must be positive".into());
        }
        if !v.d_v.is_multiple_of(v.n_heads) {
            return bad(format!("d_v {} not divisible by {} heads", v.d_v, v.n_heads));
        }
        if !v.image_height.is_multiple_of(v.patch_size) || !v.image_width.is_multiple_of(v.patch_size) {
            return bad(format!(
                "{}x{} images do not split into {}-pixel patches",
                v.image_height, v.image_width, v.patch_size
            ));
        }
        if self.seg.d_s == 0 || self.lora.rank == 0 || !(self.lora.alpha > 0.0) {
            return bad("d_s, lora rank and lora alpha must be positive".into());
        }
        Ok(())
    }

    /// Fixed-width integer encoding used by checkpoints.
    pub(crate) fn to_words(&self) -> Vec<u64> {
        let (lm, v) = (&self.lm, &self.vision);
        vec![
            lm.n_layers as u64,
            lm.d_model as u64,
            lm.n_heads as u64,
            lm.max_seq_len as u64,
            lm.vocab_size as u64,
            v.image_height as u64,
            v.image_width as u64,
            v.patch_size as u64,
            v.d_v as u64,
            v.n_blocks as u64,
            v.n_heads as u64,
            self.seg.d_s as u64,
            self.seg.decoder.code(),
            self.lora.rank as u64,
            self.lora.alpha.to_bits(),
        ]
    }

    pub(crate) const WORDS: usize = 15;

    pub(crate) fn from_words(w: &[u64]) -> Result<Self> {
        if w.len() != Self::WORDS {
            return Err(Error::TruncatedFile);
        }
        let u = |i: usize| w[i] as usize;
        let cfg = ModelConfig {
            lm: LmConfig { n_layers: u(0), d_model: u(1), n_heads: u(2), max_seq_len: u(3), vocab_size: u(4) },
            vision: VisionConfig {
                image_height: u(5),
                image_width: u(6),
                patch_size: u(7),
                d_v: u(8),
                n_blocks: u(9),
                n_heads: u(10),
            },
            seg: SegConfig {
                d_s: u(11),
                decoder: DecoderKind::from_code(w[12])
                    .ok_or_else(|| Error::Config(format!("unknown decoder code {}", w[12])))?,
            },
            lora: LoraConfig { rank: u(13), alpha: f64::from_bits(w[14]) },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Low-rank additive update `W + (alpha / rank) · (B · A)` on one weight.
///
/// `A` is `[rank, d_in]` and `B` is `[d_out, rank]`, stored under
/// `<target>.lora_a` / `<target>.lora_b`. `B` starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.target)
    }
}

/// Named parameters, adapters and the seed that fixed the frozen encoder.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamRegistry,
    pub adapters: Vec<LoraAdapter>,
    pub encoder_seed: u64,
}

pub(crate) const ENCODER_PREFIX: &str = "vision.encoder.";

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    fn linear(
        &mut self,
        reg: &mut ParamRegistry,
        name: &str,
        d_in: usize,
        d_out: usize,
        trainable: bool,
    ) -> Result<()> {
        let w = self.normal(d_in * d_out, (d_in as f64).sqrt().recip());
        reg.insert(&format!("{name}.weight"), &[d_in, d_out], w, trainable)?;
        reg.insert(&format!("{name}.bias"), &[d_out], vec![0.0; d_out], trainable)?;
        Ok(())
    }

    fn norm(&mut self, reg: &mut ParamRegistry, name: &str, d: usize) -> Result<()> {
        reg.insert(&format!("{name}.gain"), &[d], vec![1.0; d], false)?;
        reg.insert(&format!("{name}.bias"), &[d], vec![0.0; d], false)?;
        Ok(())
    }

    fn block(&mut self, reg: &mut ParamRegistry, prefix: &str, d: usize) -> Result<()> {
        self.norm(reg, &format!("{prefix}.attn_norm"), d)?;
        for proj in ["wq", "wk", "wv", "wo"] {
            self.linear(reg, &format!("{prefix}.attn.{proj}"), d, d, false)?;
        }
        self.norm(reg, &format!("{prefix}.mlp_norm"), d)?;
        self.linear(reg, &format!("{prefix}.mlp.fc1"), d, 4 * d, false)?;
        self.linear(reg, &format!("{prefix}.mlp.fc2"), 4 * d, d, false)?;
        Ok(())
    }
}

/// Names of the attention projections that carry LoRA adapters.
pub fn lora_targets(config: &ModelConfig) -> Vec<String> {
    (0..config.lm.n_layers)
        .flat_map(|l| ["wq", "wk", "wv", "wo"].map(move |p| format!("lm.layers.{l}.attn.{p}.weight")))
        .collect()
}

impl ModelBundle {
    /// Builds a model. The vision encoder is drawn from `encoder_seed` and
    /// frozen; everything else is drawn from `seed`.
    pub fn new(config: ModelConfig, encoder_seed: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut reg = ParamRegistry::new();

        let v = &config.vision;
        let mut enc = Init::new(encoder_seed);
        let patch_dim = v.patch_size * v.patch_size * 3;
        enc.linear(&mut reg, "vision.encoder.patch_embed", patch_dim, v.d_v, false)?;
        let pos = enc.normal(v.n_tokens() * v.d_v, 0.02);
        reg.insert("vision.encoder.pos_embed", &[v.n_tokens(), v.d_v], pos, false)?;
        for b in 0..v.n_blocks {
            enc.block(&mut reg, &format!("vision.encoder.blocks.{b}"), v.d_v)?;
        }

        let lm = &config.lm;
        let d = lm.d_model;
        let mut init = Init::new(seed);
        let embed = init.normal(lm.vocab_size * d, 1.0);
        reg.insert("lm.embed_tokens", &[lm.vocab_size, d], embed, true)?;
        let pos = init.normal(lm.max_seq_len * d, 0.02);
        reg.insert("lm.pos_embed", &[lm.max_seq_len, d], pos, false)?;
        for l in 0..lm.n_layers {
            init.block(&mut reg, &format!("lm.layers.{l}"), d)?;
        }
        init.norm(&mut reg, "lm.final_norm", d)?;
        let head = init.normal(d * lm.vocab_size, (d as f64).sqrt().recip());
        reg.insert("lm.lm_head.weight", &[d, lm.vocab_size], head, true)?;

        init.linear(&mut reg, "vision.projector", v.d_v, d, true)?;

        let s = &config.seg;
        init.linear(&mut reg, "seg.gamma.fc1", d, d, true)?;
        init.linear(&mut reg, "seg.gamma.fc2", d, s.d_s, true)?;
        let key_width = match s.decoder {
            DecoderKind::SubPixel => v.patch_size * v.patch_size * s.d_s,
            DecoderKind::Bilinear => s.d_s,
        };
        let w_f = init.normal(v.d_v * key_width, (v.d_v as f64).sqrt().recip());
        reg.insert("seg.decoder.w_f", &[v.d_v, key_width], w_f, true)?;
        reg.insert("seg.decoder.b_f", &[key_width], vec![0.0; key_width], true)?;

        let mut bundle = Self { config, params: reg, adapters: Vec::new(), encoder_seed };
        let lora = bundle.config.lora.clone();
        for target in lora_targets(&bundle.config) {
            let a = init.normal(lora.rank * d, (d as f64).sqrt().recip());
            bundle.attach_adapter(&target, lora.rank, lora.alpha, a, None)?;
        }
        Ok(bundle)
    }

    /// Attaches an adapter with the given `A` and optional `B` (zeros when `None`).
    pub fn attach_adapter(
        &mut self,
        target: &str,
        rank: usize,
        alpha: f64,
        a: Vec<f64>,
        b: Option<Vec<f64>>,
    ) -> Result<()> {
        let w = self.params.get(target).map_err(|_| Error::TargetNotFound(target.to_string()))?;
        let (d_in, d_out) = match w.shape() {
            [i, o] => (*i, *o),
            s => return Err(crate::tensor::TensorError::ShapeMismatch(format!("LoRA target {s:?}")).into()),
        };
        let adapter = LoraAdapter { target: target.to_string(), rank, alpha };
        self.params.insert(&adapter.a_name(), &[rank, d_in], a, true)?;
        let b = b.unwrap_or_else(|| vec![0.0; d_out * rank]);
        self.params.insert(&adapter.b_name(), &[d_out, rank], b, true)?;
        self.adapters.push(adapter);
        Ok(())
    }

    pub fn adapter_for(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }

    /// Parameter names that belong to the frozen vision encoder.
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params.names().filter(|n| n.starts_with(ENCODER_PREFIX)).map(str::to_string).collect()
    }

    /// True when every encoder parameter is frozen (features can be cached).
    pub fn encoder_frozen(&self) -> bool {
        self.params.iter().filter(|(n, _)| n.starts_with(ENCODER_PREFIX)).all(|(_, p)| !p.trainable)
    }

    /// SHA-256 over the names, shapes and little-endian values of the encoder parameters.
    pub fn encoder_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(n, _)| n.starts_with(ENCODER_PREFIX)) {
            h.update(name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// The parameter names that training is allowed to change.
pub fn is_declared_trainable(name: &str) -> bool {
    name == "lm.embed_tokens"
        || name == "lm.lm_head.weight"
        || name.ends_with(".lora_a")
        || name.ends_with(".lora_b")
        || name.starts_with("vision.projector.")
        || name.starts_with("seg.")
}
