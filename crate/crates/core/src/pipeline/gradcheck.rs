use super::forward::PreparedSample;
use crate::data::{generate_facade, make_referring_sample, FacadeFiles, FacadeSpec, LoadedSample, Style, TargetClass};
use crate::error::Result;
use crate::model::{ModelBundle, ModelConfig};
use crate::objective::{mask_loss, text_loss, total_loss, LossWeights};
use crate::seg::{decode_mask, extract_seg_embedding, project_seg, SegEmbedding};
use crate::tensor::{finite_diff_check, grad_enabled, no_grad, CheckReport, ParamRegistry, Tensor};
use crate::text::{lm_embed, lm_head, lm_layer, SpliceLayout};
use crate::vision::project_to_lm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Scale of the random LoRA `B` used during the check. A zero `B` would
/// leave every `A` gradient identically zero and the check vacuous.
const LORA_B_STD: f64 = 0.1;

/// A model drawn from `seed`, with non-zero adapters, plus one synthetic sample.
pub fn gradcheck_setup(config: &ModelConfig, seed: u64) -> Result<(ModelBundle, PreparedSample)> {
    let mut bundle = ModelBundle::new(config.clone(), seed, seed.wrapping_add(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, LORA_B_STD).expect("positive std");
    for a in bundle.adapters.clone() {
        let n = bundle.params.get(&a.b_name())?.numel();
        let values = (0..n).map(|_| normal.sample(&mut rng)).collect();
        bundle.params.set_data(&a.b_name(), values)?;
    }

    let v = &config.vision;
    let spec = FacadeSpec {
        height: v.image_height,
        width: v.image_width,
        ..FacadeSpec::sample(&mut rng, Style::Photo, v.image_height, v.image_width)
    };
    let facade = generate_facade(&spec, rng.random())?;
    let class = if rng.random_bool(0.5) { TargetClass::Window } else { TargetClass::Wall };
    let files = FacadeFiles {
        image: "gradcheck.ppm".into(),
        window_mask: "window.pgm".into(),
        wall_mask: "wall.pgm".into(),
        sha256: String::new(),
        style: Style::Photo,
    };
    let sample = make_referring_sample("gradcheck", &files, class.as_str(), class.descriptions()[0])?;
    let mask = match class {
        TargetClass::Window => facade.window,
        TargetClass::Wall => facade.wall,
    };
    let loaded = LoadedSample { sample, image: facade.image, mask };
    let prepared = PreparedSample::new(&bundle, &loaded)?;
    Ok((bundle, prepared))
}

/// The full loss as a chain of stages: projector and splice, one stage per
/// LM layer, the LM head, then the seg head. Activations entering each stage are cached
/// at the base parameters; an evaluation restarts from the first stage
/// whose parameters differ bitwise from the base, so every cached value is
/// exactly what a full forward pass would recompute.
struct StagedLoss<'a> {
    base: ModelBundle,
    sample: &'a PreparedSample,
    weights: LossWeights,
    /// Trainable parameter names read by stage `k`; stage 0 also owns any
    /// trainable name not claimed by a later stage.
    groups: Vec<Vec<String>>,
    /// `layer_inputs[l]` enters LM layer `l`; the last entry enters the LM head.
    layer_inputs: Vec<Tensor>,
    layout: SpliceLayout,
    text: Tensor,
    seg: SegEmbedding,
}

impl<'a> StagedLoss<'a> {
    fn new(base: ModelBundle, sample: &'a PreparedSample, weights: LossWeights) -> Result<Self> {
        let n_layers = base.config.lm.n_layers;
        let mut groups = vec![Vec::new(); n_layers + 3];
        for name in base.params.trainable_names() {
            let stage = if name.starts_with("seg.") {
                n_layers + 2
            } else if name.starts_with("lm.lm_head.") || name.starts_with("lm.final_norm.") {
                n_layers + 1
            } else {
                (0..n_layers).find(|l| name.starts_with(&format!("lm.layers.{l}."))).map_or(0, |l| l + 1)
            };
            groups[stage].push(name);
        }
        no_grad(|| {
            let image_tokens = project_to_lm(&base, &sample.features)?;
            let (mut x, layout) = lm_embed(&base, &sample.tokens, Some(&image_tokens))?;
            let mut layer_inputs = Vec::with_capacity(n_layers + 1);
            for l in 0..n_layers {
                layer_inputs.push(x.clone());
                x = lm_layer(&base, l, &x)?;
            }
            layer_inputs.push(x.clone());
            let out = lm_head(&base, &x, layout)?;
            let text = text_loss(&out.logits, &sample.tokens, &layout)?;
            let seg = extract_seg_embedding(&out.hidden, &sample.tokens, &layout)?;
            Ok(Self { base, sample, weights, groups, layer_inputs, layout, text, seg })
        })
    }

    fn first_changed_stage(&self, params: &ParamRegistry) -> Result<usize> {
        for (stage, names) in self.groups.iter().enumerate() {
            for name in names {
                let (now, base) = (params.get(name)?.data(), self.base.params.get(name)?.data());
                if now.iter().zip(base).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Ok(stage);
                }
            }
        }
        Ok(self.groups.len() - 1)
    }

    fn loss(&self, params: &ParamRegistry) -> Result<Tensor> {
        let view = ModelBundle { params: params.clone(), ..self.base.clone() };
        let n_layers = view.config.lm.n_layers;
        let sample = self.sample;
        // A recorded pass must build the whole graph.
        let stage = if grad_enabled() { 0 } else { self.first_changed_stage(params)? };
        let (text, seg) = if stage <= n_layers + 1 {
            let (mut x, start) = if stage == 0 {
                let image_tokens = project_to_lm(&view, &sample.features)?;
                (lm_embed(&view, &sample.tokens, Some(&image_tokens))?.0, 0)
            } else {
                (self.layer_inputs[stage - 1].clone(), stage - 1)
            };
            for l in start..n_layers {
                x = lm_layer(&view, l, &x)?;
            }
            let out = lm_head(&view, &x, self.layout)?;
            let text = text_loss(&out.logits, &sample.tokens, &self.layout)?;
            (text, extract_seg_embedding(&out.hidden, &sample.tokens, &self.layout)?)
        } else {
            (self.text.clone(), self.seg.clone())
        };
        let q = project_seg(&view, &seg)?.projected.expect("project_seg sets the projection");
        let logits = decode_mask(&view, &q, &sample.features)?;
        let mask = mask_loss(&logits, &sample.mask, &self.weights)?;
        total_loss(&text, &mask, &self.weights)
    }
}

/// Central-difference check of the full weighted loss on one sample.
pub fn model_gradcheck(config: &ModelConfig, seed: u64, h: f64, tol: f64) -> Result<CheckReport> {
    let (mut bundle, sample) = gradcheck_setup(config, seed)?;
    let staged = StagedLoss::new(bundle.clone(), &sample, LossWeights::default())?;
    finite_diff_check(|params| staged.loss(params), &mut bundle.params, h, tol, seed)
}

/// Rendered per-parameter error table.
pub fn report_table(report: &CheckReport) -> String {
    let width = report.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(9);
    let mut out = format!("{:<width$}  {:>6}  {:>12}  {:>12}\n", "parameter", "coords", "max_rel_err", "max_abs_err");
    for e in &report.entries {
        out.push_str(&format!(
            "{:<width$}  {:>6}  {:>12.3e}  {:>12.3e}\n",
            e.name, e.coords_checked, e.max_rel_error, e.max_abs_error
        ));
    }
    out.push_str(&format!(
        "max relative error {:.3e} (tol {:.1e}): {}\n",
        report.max_rel_error(),
        report.tol,
        if report.passed { "PASS" } else { "FAIL" }
    ));
    out
}
