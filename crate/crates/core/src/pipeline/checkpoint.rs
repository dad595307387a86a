//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "SAAF1"  u32 version
//! u32 n_words, n_words × u64        model config
//! u32 n_adapters, per adapter: u32 len, name, u64 rank, f64 alpha
//! u32 n_params, per param: u32 len, name, u8 trainable, u32 rank, rank × u64 dims, numel × f64
//! u64 encoder seed
//! [u8; 32] rng seed, u64 rng stream, u128 rng word position
//! u64 step counter
//! ```
//!
//! Parameters are written in registry (lexicographic) order, so
//! save → load → save is byte-identical.

use super::train::RngState;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::{LoraAdapter, ModelBundle, ModelConfig};
use crate::tensor::ParamRegistry;
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"SAAF1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub rng: RngState,
    pub step: u64,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let b = &ckpt.bundle;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    let words = b.config.to_words();
    out.extend((words.len() as u32).to_le_bytes());
    for w in words {
        out.extend(w.to_le_bytes());
    }
    out.extend((b.adapters.len() as u32).to_le_bytes());
    for a in &b.adapters {
        put_str(&mut out, &a.target);
        out.extend((a.rank as u64).to_le_bytes());
        out.extend(a.alpha.to_le_bytes());
    }
    out.extend((b.params.len() as u32).to_le_bytes());
    for (name, p) in b.params.iter() {
        put_str(&mut out, name);
        out.push(p.trainable as u8);
        let shape = p.tensor.shape();
        out.extend((shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend((d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out.extend(b.encoder_seed.to_le_bytes());
    out.extend(ckpt.rng.seed);
    out.extend(ckpt.rng.stream.to_le_bytes());
    out.extend(ckpt.rng.word_pos.to_le_bytes());
    out.extend(ckpt.step.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::TruncatedFile)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Config("checkpoint name is not UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::TruncatedFile);
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic("checkpoint: expected SAAF1".into()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    let n_words = r.u32()? as usize;
    if n_words != ModelConfig::WORDS {
        return Err(Error::Config(format!("checkpoint config has {n_words} fields")));
    }
    let words = (0..n_words).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let config = ModelConfig::from_words(&words)?;

    let n_adapters = r.u32()? as usize;
    let mut adapters = Vec::new();
    for _ in 0..n_adapters {
        let target = r.string()?;
        let rank = r.u64()? as usize;
        let alpha = r.f64()?;
        adapters.push(LoraAdapter { target, rank, alpha });
    }

    let n_params = r.u32()? as usize;
    let mut params = ParamRegistry::new();
    for _ in 0..n_params {
        let name = r.string()?;
        let trainable = r.take(1)?[0] == 1;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(Error::TruncatedFile)?;
        let raw = r.take(numel.checked_mul(8).ok_or(Error::TruncatedFile)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(&name, &shape, data, trainable)?;
    }
    let encoder_seed = r.u64()?;
    let rng = RngState { seed: r.array()?, stream: r.u64()?, word_pos: u128::from_le_bytes(r.array()?) };
    let step = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Config(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    for a in &adapters {
        for name in [&a.target, &a.a_name(), &a.b_name()] {
            if !params.contains(name) {
                return Err(Error::TargetNotFound(name.clone()));
            }
        }
    }
    Ok(Checkpoint { bundle: ModelBundle { config, params, adapters, encoder_seed }, rng, step })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
