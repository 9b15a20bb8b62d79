//! Samples, batches, the feature-archive file format and the synthetic
//! stand-in dataset.

mod archive;
mod batch;
mod synth;

pub use archive::{load_archive, parse_archive, write_archive, ArchiveRecord, FeatureArchive, Manifest, ARCHIVE_VERSION};
pub use batch::{eval_batches, make_batches, Batch, PadLimits, PaddedFrames, PaddedTokens};
pub use synth::{generate_synthetic, generate_synthetic_with_latents, SynthSpec, SyntheticData};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Token id playing the role of the leading [CLS] token.
pub const CLS_ID: usize = 0;
/// Token id used for padding.
pub const PAD_ID: usize = 1;

pub const LABEL_MIN: f64 = -3.0;
pub const LABEL_MAX: f64 = 3.0;

/// One annotated clip.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceSample {
    pub id: String,
    pub tokens: Vec<usize>,
    pub text: Option<String>,
    /// `T_v x d_v` per-frame visual features.
    pub visual: Matrix,
    /// `T_a x d_a` per-frame acoustic features.
    pub audio: Matrix,
    pub label: f64,
}

impl UtteranceSample {
    /// Checks the sample against the archive dimensions.
    pub fn validate(&self, d_v: usize, d_a: usize, vocab: usize) -> Result<()> {
        let record = || self.id.clone();
        if self.tokens.is_empty() {
            return Err(Error::EmptySequence { record: record(), modality: "text" });
        }
        if let Some(&id) = self.tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfVocab { id, vocab });
        }
        for (name, m, d) in [("visual", &self.visual, d_v), ("audio", &self.audio, d_a)] {
            if m.rows() == 0 {
                return Err(Error::EmptySequence { record: record(), modality: name });
            }
            if m.cols() != d {
                return Err(Error::DimensionMismatch { record: record(), modality: name, expected: d, found: m.cols() });
            }
            if !m.is_finite() {
                return Err(Error::NonFiniteValue { record: record(), field: name });
            }
        }
        if !self.label.is_finite() {
            return Err(Error::NonFiniteValue { record: record(), field: "label" });
        }
        if !(LABEL_MIN..=LABEL_MAX).contains(&self.label) {
            return Err(Error::LabelOutOfRange { record: record(), label: self.label });
        }
        Ok(())
    }
}
