use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("record `{record}`: {modality} width {found} does not match manifest {expected}")]
    DimensionMismatch { record: String, modality: &'static str, expected: usize, found: usize },

    #[error("record `{record}`: non-finite value in {field}")]
    NonFiniteValue { record: String, field: &'static str },

    #[error("record `{record}`: label {label} outside [-3, 3]")]
    LabelOutOfRange { record: String, label: f64 },

    #[error("record `{record}`: empty {modality} sequence")]
    EmptySequence { record: String, modality: &'static str },

    #[error("record `{record}` appears more than once")]
    DuplicateId { record: String },

    #[error("split `{split}` has {found} records, manifest says {expected}")]
    SplitCount { split: String, expected: usize, found: usize },

    #[error("split `{0}` is empty or missing")]
    EmptySplit(String),

    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },

    #[error("sequence {sample} does not start with the [CLS] id")]
    MissingCls { sample: usize },

    #[error("sequence length {len} exceeds the maximum of {max} positions")]
    SequenceTooLong { len: usize, max: usize },

    #[error("{context}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { context: String, expected: (usize, usize), found: (usize, usize) },

    #[error("{context}: row {row} has zero norm, cosine similarity undefined")]
    DegenerateEmbedding { context: &'static str, row: usize },

    #[error("{modality} attention for sample {sample} has no valid positions")]
    EmptyAttention { modality: &'static str, sample: usize },

    #[error("need at least {needed} samples, found {found}")]
    TooFewSamples { needed: usize, found: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss { component: &'static str, step: usize },

    #[error("total loss {logged} differs from re-summed components {resummed} at step {step}")]
    LossDecomposition { step: usize, logged: f64, resummed: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("refusing to overwrite existing file {0}")]
    WouldOverwrite(PathBuf),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io { path: path.to_path_buf(), source }
        }
    }

    /// Stable machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "missing_file",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::InvalidManifest(_) => "invalid_manifest",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFiniteValue { .. } => "non_finite_value",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::EmptySequence { .. } => "empty_sequence",
            Error::DuplicateId { .. } => "duplicate_id",
            Error::SplitCount { .. } => "split_count",
            Error::EmptySplit(_) => "empty_split",
            Error::TokenOutOfVocab { .. } => "token_out_of_vocab",
            Error::MissingCls { .. } => "missing_cls",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::DegenerateEmbedding { .. } => "degenerate_embedding",
            Error::EmptyAttention { .. } => "empty_attention",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::LossDecomposition { .. } => "loss_decomposition",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::WouldOverwrite(_) => "would_overwrite",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
