use super::config::TrainConfig;
use super::forward::{sample_loss, PreparedSample};
use crate::data::{load_split, DatasetManifest, LoadedSample, Split};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::{adam_step, AdamState};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// One optimizer step's losses, averaged over its effective batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub text: f64,
    pub mask: f64,
    pub total: f64,
}

impl LossRecord {
    /// `step,L_t,L_m,L` with 17 significant digits.
    pub fn to_line(&self) -> String {
        format!("{},{:.16e},{:.16e},{:.16e}", self.step, self.text, self.mask, self.total)
    }
}

pub fn format_log(log: &[LossRecord]) -> String {
    log.iter().map(|r| r.to_line() + "\n").collect()
}

/// Exact position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Visits every sample once per epoch in a freshly shuffled order.
struct EpochSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self { rng, order: (0..n).collect(), pos: n }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<LossRecord>,
    pub rng: RngState,
    pub steps: u64,
}

/// Trains a freshly initialised model on `samples`.
///
/// Each step runs `per_device_batch · grad_accum` teacher-forced samples,
/// accumulating gradients of the mean total loss, then takes one Adam step.
/// `on_step` sees every log record as it is produced.
pub fn train(
    config: &TrainConfig,
    samples: &[LoadedSample],
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptySplit(Split::Train.as_str().into()));
    }
    let mut bundle = ModelBundle::new(config.model.clone(), config.encoder_seed, config.seed)?;
    let prepared = samples.iter().map(|s| PreparedSample::new(&bundle, s)).collect::<Result<Vec<_>>>()?;
    let mut sampler = EpochSampler::new(prepared.len(), config.seed);
    let mut adam = AdamState::with_lr(config.lr)?;
    let per_step = config.effective_batch();
    let inv = 1.0 / per_step as f64;
    let mut log = Vec::with_capacity(config.max_steps);

    for step in 1..=config.max_steps {
        let (mut text, mut mask, mut total) = (0.0, 0.0, 0.0);
        for _ in 0..per_step {
            let sample = &prepared[sampler.next()];
            let (parts, _) = sample_loss(&bundle, sample, &config.weights)?;
            text += parts.text.item()?;
            mask += parts.mask.item()?;
            total += parts.total.item()?;
            parts.total.scale(inv)?.backward()?;
        }
        adam_step(&mut bundle.params, &mut adam)?;
        let record = LossRecord { step, text: text * inv, mask: mask * inv, total: total * inv };
        on_step(&record);
        log.push(record);
    }
    Ok(TrainOutcome { bundle, log, rng: RngState::capture(&sampler.rng), steps: config.max_steps as u64 })
}

/// Loads the train split of `manifest` under `root` and trains on it.
pub fn train_on_manifest(
    config: &TrainConfig,
    root: &Path,
    manifest: &DatasetManifest,
    on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    let samples = load_split(root, manifest, Split::Train)?;
    train(config, &samples, on_step)
}
