//! The visually-conditioned TTS network: text encoder, visual encoder,
//! visual-text cross attention, 4x upsampler, speaker conditioning and a
//! non-autoregressive spectrogram decoder.
//!
//! Batches are packed: the rows of every utterance are stacked and a
//! [`Segments`] table records where each one starts, so attention and
//! convolution never mix utterances and no padding is needed.

pub mod checkpoint;
mod network;
mod params;
pub(crate) mod tape;

use std::ops::Range;

use ndarray::{Array2, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CheckpointMeta, Moments, TrainProgress};
pub use network::{packed_targets, ModelInput, Prediction, Stack, VisoTts};
pub use params::ParamStore;

/// Network hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub text_blocks: usize,
    pub visual_blocks: usize,
    pub decoder_blocks: usize,
    pub conv_kernel: usize,
    pub conv_hidden: usize,
    pub upsample_n: usize,
    pub mel_bins: usize,
    pub visual_in: usize,
    pub speaker_in: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 2,
            text_blocks: 4,
            visual_blocks: 4,
            decoder_blocks: 6,
            conv_kernel: 9,
            conv_hidden: 256,
            upsample_n: crate::synthcorpus::UPSAMPLE_N,
            mel_bins: crate::dsp::N_MELS,
            visual_in: crate::synthcorpus::VISUAL_DIM,
            speaker_in: crate::synthcorpus::SPEAKER_DIM,
            vocab_size: 43,
            dropout: 0.1,
            max_len: 1000,
        }
    }
}

impl ModelConfig {
    /// Default config at width `d`, feed-forward hidden width `4d`.
    pub fn with_width(d: usize) -> Self {
        Self {
            d,
            conv_hidden: 4 * d,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelConfig(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.upsample_n != crate::synthcorpus::UPSAMPLE_N {
            return bad(format!(
                "upsample_n = {} but the 25 fps / 10 ms rates force {}",
                self.upsample_n,
                crate::synthcorpus::UPSAMPLE_N
            ));
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel = {} must be odd", self.conv_kernel));
        }
        if self.conv_hidden == 0 || self.mel_bins == 0 || self.visual_in == 0 || self.speaker_in == 0 {
            return bad("widths must be positive".into());
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return bad("vocab_size and max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Row offsets of the utterances stacked in a packed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        offsets.push(0);
        for &l in lengths {
            offsets.push(offsets.last().unwrap() + l);
        }
        Self { offsets }
    }

    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    /// Number of segments.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total row count.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, b: usize) -> Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.offsets.windows(2).map(|w| w[1] - w[0])
    }

    /// Every segment stretched by `n`.
    pub fn scaled(&self, n: usize) -> Self {
        Self {
            offsets: self.offsets.iter().map(|o| o * n).collect(),
        }
    }

    /// Segment index of every row.
    pub fn owners(&self) -> Vec<usize> {
        self.ranges()
            .enumerate()
            .flat_map(|(b, r)| std::iter::repeat_n(b, r.len()))
            .collect()
    }
}

/// `N x d` output of the text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding<F>(pub Array2<F>);

/// `T x d` output of the visual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedding<F>(pub Array2<F>);

/// `T x N` attention of video frames over phonemes, averaged over heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    weights: Array2<f64>,
}

pub const STOCHASTIC_TOLERANCE: f64 = 1e-5;

impl AlignmentMatrix {
    /// Rows must be non-negative and sum to one.
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::Shape("empty alignment matrix".into()));
        }
        for (row, r) in weights.rows().into_iter().enumerate() {
            let sum: f64 = r.sum();
            if r.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
                return Err(Error::NotStochastic { row, sum });
            }
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn n_frames(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_phonemes(&self) -> usize {
        self.weights.ncols()
    }
}

/// Sinusoidal table: `(pos, 2i) = sin(pos / 10000^(2i/d))`, `(pos, 2i+1)` the
/// matching cosine.
pub fn positional_encoding(length: usize, d: usize, max_len: usize) -> Result<Array2<f64>> {
    if length > max_len {
        return Err(Error::TooLong { len: length, max_len });
    }
    Ok(Array2::from_shape_fn((length, d), |(pos, j)| {
        let i2 = (j - j % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// Nearest-neighbour repetition: output row `r` is input row `r / n`.
pub fn upsample<F: NdFloat>(context: &Array2<F>, n: usize) -> Array2<F> {
    Array2::from_shape_fn((context.nrows() * n, context.ncols()), |(r, c)| context[[r / n, c]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    #[test]
    fn positional_rows() {
        let pe = positional_encoding(5, 8, 1000).unwrap();
        for j in 0..8 {
            assert_eq!(pe[[0, j]], if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[[1, 0]] - 0.84147).abs() < 1e-5);
        assert!((pe[[3, 5]] - (3.0 / 10000f64.powf(4.0 / 8.0)).cos()).abs() < 1e-15);
        let big = positional_encoding(1000, 64, 1000).unwrap();
        assert!(big.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(
            positional_encoding(1001, 64, 1000),
            Err(Error::TooLong { len: 1001, max_len: 1000 })
        ));
    }

    #[test]
    fn upsample_rows() {
        let x = ndarray::array![[1.0f32, 2.0], [3.0, 4.0]];
        let up = upsample(&x, 4);
        assert_eq!(up.nrows(), 8);
        for r in 0..4 {
            assert_eq!(up.row(r), x.row(0));
        }
        assert_eq!(up.slice(s![..;4, ..]), x);
    }

    #[test]
    fn rate_ratio() {
        let video_ms = 1000 / crate::synthcorpus::FPS as usize;
        let hop_ms = 1000 * crate::dsp::HOP_LENGTH / crate::dsp::SAMPLE_RATE as usize;
        assert_eq!(video_ms / hop_ms, ModelConfig::default().upsample_n);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert_eq!(ModelConfig::with_width(16).conv_hidden, 64);
        for bad in [
            ModelConfig { upsample_n: 3, ..Default::default() },
            ModelConfig { heads: 3, ..Default::default() },
            ModelConfig { conv_kernel: 4, ..Default::default() },
            ModelConfig { dropout: 1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::ModelConfig(_))));
        }
    }

    #[test]
    fn segments_bookkeeping() {
        let s = Segments::from_lengths(&[2, 3]);
        assert_eq!(s.total(), 5);
        assert_eq!(s.range(1), 2..5);
        assert_eq!(s.owners(), vec![0, 0, 1, 1, 1]);
        assert_eq!(s.scaled(4).range(1), 8..20);
    }

    #[test]
    fn alignment_validation() {
        assert!(AlignmentMatrix::new(ndarray::array![[0.5, 0.5], [1.0, 0.0]]).is_ok());
        assert!(matches!(
            AlignmentMatrix::new(ndarray::array![[0.5, 0.4]]),
            Err(Error::NotStochastic { row: 0, .. })
        ));
        assert!(AlignmentMatrix::new(ndarray::array![[1.5, -0.5]]).is_err());
    }
}
