use crate::error::{Error, Result};
use crate::model::{DecoderKind, ModelConfig};
use crate::objective::LossWeights;
use std::path::{Path, PathBuf};

/// Training run settings, read from `key = value` lines.
///
/// Defaults are the full-scale schedule (lr 1e-4, micro-batch 2,
/// accumulation 10, loss weights 0.8 / 0.8 / 2.0 / 0.5). The desk-scale
/// presets in `configs/` raise the learning rate and shorten accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub per_device_batch: usize,
    pub grad_accum: usize,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub data: Option<PathBuf>,
    pub seed: u64,
    pub encoder_seed: u64,
    pub checkpoint_out: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub log_every: usize,
    /// Binarization threshold used for the metrics reported after training.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            max_steps: 2000,
            per_device_batch: 2,
            grad_accum: 10,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            data: None,
            seed: 0,
            encoder_seed: 0,
            checkpoint_out: None,
            loss_log: None,
            log_every: 100,
            threshold: 0.5,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "lr",
    "max_steps",
    "per_device_batch",
    "grad_accum",
    "theta_t",
    "theta_m",
    "theta_bce",
    "theta_dice",
    "lora_rank",
    "lora_alpha",
    "n_layers",
    "d_model",
    "n_heads",
    "max_seq_len",
    "image_size",
    "patch_size",
    "d_v",
    "vision_blocks",
    "vision_heads",
    "d_s",
    "decoder",
    "data",
    "seed",
    "encoder_seed",
    "checkpoint_out",
    "loss_log",
    "log_every",
    "threshold",
];

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.per_device_batch * self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.max_steps == 0 || self.per_device_batch == 0 || self.grad_accum == 0 || self.log_every == 0 {
            return bad("max_steps, per_device_batch, grad_accum and log_every must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        let m = &mut self.model;
        match key {
            "lr" => self.lr = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "per_device_batch" => self.per_device_batch = num(key, value)?,
            "grad_accum" => self.grad_accum = num(key, value)?,
            "theta_t" => self.weights.text = num(key, value)?,
            "theta_m" => self.weights.mask = num(key, value)?,
            "theta_bce" => self.weights.bce = num(key, value)?,
            "theta_dice" => self.weights.dice = num(key, value)?,
            "lora_rank" => m.lora.rank = num(key, value)?,
            "lora_alpha" => m.lora.alpha = num(key, value)?,
            "n_layers" => m.lm.n_layers = num(key, value)?,
            "d_model" => m.lm.d_model = num(key, value)?,
            "n_heads" => m.lm.n_heads = num(key, value)?,
            "max_seq_len" => m.lm.max_seq_len = num(key, value)?,
            "image_size" => {
                let s: usize = num(key, value)?;
                m.vision.image_height = s;
                m.vision.image_width = s;
            }
            "patch_size" => m.vision.patch_size = num(key, value)?,
            "d_v" => m.vision.d_v = num(key, value)?,
            "vision_blocks" => m.vision.n_blocks = num(key, value)?,
            "vision_heads" => m.vision.n_heads = num(key, value)?,
            "d_s" => m.seg.d_s = num(key, value)?,
            "decoder" => {
                m.seg.decoder = DecoderKind::parse(value)
                    .ok_or_else(|| Error::Config(format!("`decoder`: expected subpixel or bilinear, got `{value}`")))?
            }
            "data" => self.data = Some(PathBuf::from(value)),
            "seed" => self.seed = num(key, value)?,
            "encoder_seed" => self.encoder_seed = num(key, value)?,
            "checkpoint_out" => self.checkpoint_out = Some(PathBuf::from(value)),
            "loss_log" => self.loss_log = Some(PathBuf::from(value)),
            "log_every" => self.log_every = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses config text over the defaults. `#` starts a comment; blank
    /// lines are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", i + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
