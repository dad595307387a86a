use crate::tensor::TensorError;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    // text model
    #[error("unsupported character {ch:?} at byte offset {offset}")]
    UnsupportedCharacter { ch: char, offset: usize },
    #[error("token id {0} is outside the vocabulary")]
    IdOutOfRange(usize),
    #[error("sequence of {len} positions exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("image tokens supplied but the sequence has no <IMG> placeholder")]
    MissingImgPlaceholder,
    #[error("sequence has {0} <IMG> placeholders, expected one")]
    MultipleImgPlaceholders(usize),
    #[error("LoRA target `{0}` does not exist")]
    TargetNotFound(String),

    // vision / segmentation
    #[error("image of {height}x{width} is not divisible into {patch}x{patch} patches")]
    NonDivisibleDims { height: usize, width: usize, patch: usize },
    #[error("no <SEG> token in the sequence")]
    NoSegToken,
    #[error("threshold {0} is outside (0, 1)")]
    BadThreshold(f64),
    #[error("expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    DimsMismatch { expected_h: usize, expected_w: usize, got_h: usize, got_w: usize },

    // objective
    #[error("no supervised positions in the sequence")]
    NoSupervisedPositions,
    #[error("non-finite loss term: {0}")]
    NonFinite(&'static str),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),

    // data
    #[error("facade spec cannot be realised: {0}")]
    SpecInfeasible(String),
    #[error("unknown target class `{0}`")]
    UnknownClass(String),
    #[error("description is empty")]
    EmptyDescription,
    #[error("need at least {needed} samples to split, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord { path: PathBuf, line: usize, reason: String },
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("content hash {0} appears in more than one split")]
    SplitOverlap(String),
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error("mask byte {value} at offset {offset} is neither 0 nor 255")]
    NonBinaryMaskValue { value: u8, offset: usize },
    #[error("malformed image file: {0}")]
    MalformedImage(String),

    // pipeline
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    TruncatedFile,
    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for failures caused by input data or files rather than the model.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::UnsupportedCharacter { .. }
                | Error::SpecInfeasible(_)
                | Error::UnknownClass(_)
                | Error::EmptyDescription
                | Error::TooFewSamples { .. }
                | Error::MalformedRecord { .. }
                | Error::MissingFile(_)
                | Error::SplitOverlap(_)
                | Error::NonBinaryMaskValue { .. }
                | Error::MalformedImage(_)
                | Error::EmptySplit(_)
                | Error::DimsMismatch { .. }
                | Error::NonDivisibleDims { .. }
                | Error::Io { .. }
                | Error::Config(_)
        ) || matches!(self, Error::BadMagic(what) if !what.contains("checkpoint"))
    }
}
