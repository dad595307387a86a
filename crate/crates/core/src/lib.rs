//! Embedding-as-mask referring segmentation at desk scale.
//!
//! A tiny causal language model reads a facade image (as spliced image
//! tokens) and a description, answers with a `<SEG>` token, and the final
//! hidden state of that token is decoded against the frozen encoder's
//! feature grid into a binary window/wall mask.

// Validation writes `!(x > 0.0)` on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod model;
mod nn;
pub mod objective;
pub mod pipeline;
pub mod seg;
pub mod tensor;
pub mod text;
pub mod vision;

pub use error::{Error, Result};
pub use model::{DecoderKind, LmConfig, LoraAdapter, LoraConfig, ModelBundle, ModelConfig, SegConfig, VisionConfig};
pub use objective::{LossWeights, MetricsReport};
pub use seg::{BinaryMask, MaskLogits, SegEmbedding};
pub use tensor::{ParamRegistry, Tensor, TensorError};
pub use text::{TokenSequence, Vocabulary};
pub use vision::{FeatureMap, ImageTensor};
