use super::forward::seg_logits;
use crate::data::{load_split, render_prompt, write_mask, DatasetManifest, LoadedSample, Split, Style};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::objective::{sample_metrics, MetricsReport, SampleMetrics};
use crate::seg::{binarize, BinaryMask};
use crate::tensor::no_grad;
use crate::text::{greedy_decode, tokenize, SEG};
use crate::vision::{encode, project_to_lm};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Upper bound on generated answer tokens.
pub const MAX_ANSWER_TOKENS: usize = 48;

/// Produces a binary mask for a sample. Implemented by the model and by test oracles.
pub trait MaskPredictor {
    fn predict(&self, sample: &LoadedSample) -> Result<BinaryMask>;
}

/// Where the `<SEG>` embedding is read during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SegLocator {
    /// The reference answer is fed after the prompt.
    #[default]
    TeacherForced,
    /// The model's own greedy answer; a missing `<SEG>` is an error.
    FreeDecode,
}

pub struct ModelPredictor<'a> {
    pub bundle: &'a ModelBundle,
    pub threshold: f64,
    pub locator: SegLocator,
}

impl MaskPredictor for ModelPredictor<'_> {
    fn predict(&self, sample: &LoadedSample) -> Result<BinaryMask> {
        no_grad(|| {
            let features = encode(self.bundle, &sample.image)?;
            let tokens = match self.locator {
                SegLocator::TeacherForced => sample.sample.tokens()?,
                SegLocator::FreeDecode => {
                    let prompt = tokenize(&sample.sample.prompt)?;
                    let image_tokens = project_to_lm(self.bundle, &features)?;
                    let seq = greedy_decode(self.bundle, &prompt, Some(&image_tokens), MAX_ANSWER_TOKENS)?;
                    if !seq.ids[prompt.len()..].contains(&SEG) {
                        return Err(Error::NoSegToken);
                    }
                    seq
                }
            };
            let (logits, _) = seg_logits(self.bundle, &tokens, &features)?;
            binarize(&logits, self.threshold)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub id: String,
    pub style: Style,
    pub metrics: SampleMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: MetricsReport,
    pub per_style: BTreeMap<Style, MetricsReport>,
    pub samples: Vec<SampleResult>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// One row per style present, then the aggregate.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<14}{:>8}{:>12}{:>12}{:>10}{:>10}\n",
            "style", "samples", "iou_window", "iou_wall", "miou", "pa"
        );
        let rows = self.per_style.iter().map(|(s, r)| (s.as_str(), r)).chain([("all", &self.overall)]);
        for (name, r) in rows {
            let _ = writeln!(
                out,
                "{:<14}{:>8}{:>12}{:>12}{:>10.4}{:>10.4}",
                name,
                r.samples,
                fmt_opt(r.iou_window),
                fmt_opt(r.iou_wall),
                r.miou,
                r.pa
            );
        }
        out
    }
}

/// Scores `predictor` on `samples` in order. With `dump`, each predicted
/// mask is written as `<dump>/<id>.pgm`.
pub fn evaluate(predictor: &dyn MaskPredictor, samples: &[LoadedSample], dump: Option<&Path>) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predictor.predict(s)?;
        if let Some(dir) = dump {
            write_mask(&dir.join(format!("{}.pgm", s.sample.id)), &pred)?;
        }
        results.push(SampleResult {
            id: s.sample.id.clone(),
            style: s.sample.style,
            metrics: sample_metrics(&pred, &s.mask)?,
        });
    }
    let overall = MetricsReport::from_samples(&results.iter().map(|r| r.metrics).collect::<Vec<_>>())
        .ok_or_else(|| Error::EmptySplit("evaluation set".into()))?;
    let mut by_style: BTreeMap<Style, Vec<SampleMetrics>> = BTreeMap::new();
    for r in &results {
        by_style.entry(r.style).or_default().push(r.metrics);
    }
    let per_style =
        by_style.into_iter().map(|(s, m)| (s, MetricsReport::from_samples(&m).expect("non-empty group"))).collect();
    Ok(EvalReport { overall, per_style, samples: results })
}

/// Loads `split` from the dataset under `root` and evaluates it.
pub fn evaluate_split(
    predictor: &dyn MaskPredictor,
    root: &Path,
    manifest: &DatasetManifest,
    split: Split,
    dump: Option<&Path>,
) -> Result<EvalReport> {
    let samples = load_split(root, manifest, split)?;
    if samples.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    evaluate(predictor, &samples, dump)
}

/// Result of segmenting one image from a description.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOutcome {
    pub answer: String,
    pub mask: BinaryMask,
    /// True when `<SEG>` was appended because the model did not emit one.
    pub forced_seg: bool,
}

/// Greedy-decodes the answer for `description` and decodes the mask at its
/// first `<SEG>`. Without one, `force_seg` appends `<SEG>` to the answer.
pub fn segment(
    bundle: &ModelBundle,
    image: &crate::vision::ImageTensor,
    description: &str,
    force_seg: bool,
    threshold: f64,
) -> Result<SegmentOutcome> {
    no_grad(|| {
        let features = encode(bundle, image)?;
        let prompt = tokenize(&render_prompt(description))?;
        let image_tokens = project_to_lm(bundle, &features)?;
        let mut seq = greedy_decode(bundle, &prompt, Some(&image_tokens), MAX_ANSWER_TOKENS)?;
        let answer = crate::text::detokenize(&seq.ids[prompt.len()..])?;
        let forced_seg = !seq.ids[prompt.len()..].contains(&SEG);
        if forced_seg {
            if !force_seg {
                return Err(Error::NoSegToken);
            }
            seq.push(SEG, false);
        }
        let (logits, _) = seg_logits(bundle, &seq, &features)?;
        Ok(SegmentOutcome { answer, mask: binarize(&logits, threshold)?, forced_seg })
    })
}
