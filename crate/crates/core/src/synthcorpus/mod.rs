//! Synthetic paired corpus: phonemes, per-frame visual features, target mels
//! and speaker embeddings with a known frame-to-phoneme alignment.
//!
//! Every visual frame carries a fixed 512-d signature of the phoneme active
//! at that frame; each video frame expands to four mel frames holding that
//! phoneme's spectral template shifted by a per-speaker offset. With the
//! noise levels at zero the mel is exactly `template[phoneme(t)] +
//! offset[speaker]`, which gives tests a brute-force reconstruction oracle.

mod generate;
mod speaker;
mod store;

use ndarray::Array2;

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::text::PhonemeSequence;

pub use generate::{
    generate_corpus, generate_utterance, CorpusConfig, GenerationParams, SynthesisTables,
};
pub use speaker::{
    random_segment, SpeakerEmbedding, SpectralSpeakerEmbedder, TableSpeakerEmbedder,
    SPEAKER_DIM,
};
pub use store::{
    read_corpus, write_utterance, Corpus, CorpusManifest, GeneratorInfo, SpeakerEntry,
    UtteranceEntry, VocabularyRef,
};

pub const VISUAL_DIM: usize = 512;
pub const FPS: u32 = 25;
/// Mel frames per video frame: 40 ms video frames over a 10 ms mel hop.
pub const UPSAMPLE_N: usize = 4;

/// `T x 512` visual features at 25 fps.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureSequence {
    features: Array2<f32>,
}

impl VisualFeatureSequence {
    pub fn new(features: Array2<f32>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Shape("visual sequence has no frames".into()));
        }
        if features.ncols() != VISUAL_DIM {
            return Err(Error::Shape(format!(
                "visual features have width {}, expected {VISUAL_DIM}",
                features.ncols()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("visual features contain non-finite values".into()));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn n_frames(&self) -> usize {
        self.features.nrows()
    }
}

/// One paired example.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phonemes: PhonemeSequence,
    pub visual: VisualFeatureSequence,
    pub mel: MelSpectrogram,
    pub speaker: SpeakerEmbedding,
    /// Phoneme index active at each video frame.
    pub oracle_alignment: Vec<u32>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.visual.n_frames()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.visual.n_frames();
        let n = self.phonemes.len();
        if self.mel.n_frames() != UPSAMPLE_N * t {
            return Err(Error::Shape(format!(
                "{}: {} mel frames for {t} video frames",
                self.id,
                self.mel.n_frames()
            )));
        }
        validate_alignment(&self.oracle_alignment, t, n)
            .map_err(|e| Error::Shape(format!("{}: {e}", self.id)))
    }
}

/// Monotone, starts at 0, ends at `n - 1`, and visits every phoneme.
pub fn validate_alignment(align: &[u32], t: usize, n: usize) -> std::result::Result<(), String> {
    if align.len() != t {
        return Err(format!("alignment has {} entries for {t} frames", align.len()));
    }
    if align.first() != Some(&0) || align.last() != Some(&(n as u32 - 1)) {
        return Err("alignment must start at 0 and end at N-1".into());
    }
    for w in align.windows(2) {
        if w[1] < w[0] || w[1] > w[0] + 1 {
            return Err("alignment must be non-decreasing and skip no phoneme".into());
        }
    }
    Ok(())
}
