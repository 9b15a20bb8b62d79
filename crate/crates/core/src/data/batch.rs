use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FeatureArchive, UtteranceSample, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Optional caps on padded lengths; longer sequences lose their tail.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PadLimits {
    pub max_text: Option<usize>,
    pub max_frames: Option<usize>,
}

/// Token ids for a batch, `batch * len` row-major, padded with [`PAD_ID`].
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedTokens {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub len: usize,
}

/// Frame features for a batch as a `(batch * len) x dim` matrix, zero padded.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedFrames {
    pub data: Matrix,
    pub mask: Vec<bool>,
    pub len: usize,
}

impl PaddedFrames {
    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.mask.chunks(self.len).map(|c| c.iter().filter(|&&m| m).count()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub labels: Vec<f64>,
    pub tokens: PaddedTokens,
    pub visual: PaddedFrames,
    pub audio: PaddedFrames,
}

fn pad_frames(seqs: &[&Matrix], cap: Option<usize>) -> PaddedFrames {
    let dim = seqs[0].cols();
    let len = seqs.iter().map(|m| m.rows()).max().unwrap_or(0);
    let len = cap.map_or(len, |c| len.min(c));
    let mut data = Matrix::zeros(seqs.len() * len, dim);
    let mut mask = vec![false; seqs.len() * len];
    for (b, m) in seqs.iter().enumerate() {
        for t in 0..m.rows().min(len) {
            data.row_mut(b * len + t).copy_from_slice(m.row(t));
            mask[b * len + t] = true;
        }
    }
    PaddedFrames { data, mask, len }
}

impl Batch {
    pub fn from_samples(samples: &[&UtteranceSample], limits: PadLimits) -> Self {
        assert!(!samples.is_empty(), "empty batch");
        let len = samples.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
        let len = limits.max_text.map_or(len, |c| len.min(c));
        let mut ids = vec![PAD_ID; samples.len() * len];
        let mut mask = vec![false; samples.len() * len];
        for (b, s) in samples.iter().enumerate() {
            for (t, &tok) in s.tokens.iter().take(len).enumerate() {
                ids[b * len + t] = tok;
                mask[b * len + t] = true;
            }
        }
        let visual: Vec<&Matrix> = samples.iter().map(|s| &s.visual).collect();
        let audio: Vec<&Matrix> = samples.iter().map(|s| &s.audio).collect();
        Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            tokens: PaddedTokens { ids, mask, len },
            visual: pad_frames(&visual, limits.max_frames),
            audio: pad_frames(&audio, limits.max_frames),
        }
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Shuffles a split with `seed` and cuts it into batches of `batch_size`;
/// a final batch with fewer than two samples is dropped.
pub fn make_batches(archive: &FeatureArchive, split: &str, batch_size: usize, seed: u64, limits: PadLimits) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!("batch_size must be at least 2, got {batch_size}")));
    }
    let mut samples = archive.split(split);
    if samples.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(samples.chunks(batch_size).filter(|c| c.len() >= 2).map(|c| Batch::from_samples(c, limits)).collect())
}

/// Batches a split in file order, keeping every sample.
pub fn eval_batches(archive: &FeatureArchive, split: &str, batch_size: usize, limits: PadLimits) -> Result<Vec<Batch>> {
    let samples = archive.split(split);
    if samples.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    Ok(samples.chunks(batch_size.max(1)).map(|c| Batch::from_samples(c, limits)).collect())
}
