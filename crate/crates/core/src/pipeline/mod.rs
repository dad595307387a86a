//! Training, evaluation, single-image segmentation, checkpoints and the
//! full-model gradient check.

mod checkpoint;
mod config;
mod eval;
mod forward;
mod gradcheck;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION,
};
pub use config::{TrainConfig, CONFIG_KEYS};
pub use eval::{
    evaluate, evaluate_split, segment, EvalReport, MaskPredictor, ModelPredictor, SampleResult, SegLocator,
    SegmentOutcome, MAX_ANSWER_TOKENS,
};
pub use forward::{sample_loss, seg_logits, LossParts, PreparedSample};
pub use gradcheck::{gradcheck_setup, model_gradcheck, report_table, DEFAULT_H, DEFAULT_TOL};
pub use train::{format_log, train, train_on_manifest, LossRecord, RngState, TrainOutcome};
