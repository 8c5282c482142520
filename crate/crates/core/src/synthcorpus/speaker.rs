use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dsp::{AudioClip, MelExtractor, N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::seed;

pub const SPEAKER_DIM: usize = 256;
const NORM_TOLERANCE: f64 = 1e-4;
const PROJECTION_SEED: u64 = 0x5eed_0256;

/// Unit-norm 256-d voice identity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub speaker_id: String,
    vector: Vec<f32>,
}

impl SpeakerEmbedding {
    /// Checks the width, finiteness and unit norm.
    pub fn new(speaker_id: impl Into<String>, vector: Vec<f32>) -> Result<Self> {
        let speaker_id = speaker_id.into();
        if vector.len() != SPEAKER_DIM {
            return Err(Error::Shape(format!(
                "speaker {speaker_id}: embedding width {}, expected {SPEAKER_DIM}",
                vector.len()
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("speaker {speaker_id}: non-finite embedding")));
        }
        let norm = l2(&vector);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Shape(format!(
                "speaker {speaker_id}: embedding norm {norm}, expected 1"
            )));
        }
        Ok(Self { speaker_id, vector })
    }

    /// Scale an arbitrary non-zero vector to unit norm.
    pub fn normalized(speaker_id: impl Into<String>, vector: &[f64]) -> Result<Self> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Shape("cannot normalize a zero or non-finite embedding".into()));
        }
        Self::new(speaker_id, vector.iter().map(|v| (v / norm) as f32).collect())
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn cosine(&self, other: &SpeakerEmbedding) -> f64 {
        let dot: f64 = self
            .vector
            .iter()
            .zip(&other.vector)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        dot / (l2(&self.vector) * l2(&other.vector))
    }
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
}

/// Fixed random unit vector per known speaker id.
#[derive(Debug, Clone)]
pub struct TableSpeakerEmbedder {
    seed: u64,
    speakers: Vec<String>,
}

impl TableSpeakerEmbedder {
    pub fn new(seed: u64, speakers: Vec<String>) -> Self {
        Self { seed, speakers }
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn embed(&self, speaker_id: &str) -> Result<SpeakerEmbedding> {
        if !self.speakers.iter().any(|s| s == speaker_id) {
            return Err(Error::UnknownSpeaker(speaker_id.to_string()));
        }
        let mut rng = seed::rng(seed::derive_str(self.seed, "speaker", speaker_id), "vector", 0);
        let raw: Vec<f64> = (0..SPEAKER_DIM).map(|_| rng.sample(StandardNormal)).collect();
        SpeakerEmbedding::normalized(speaker_id, &raw)
    }
}

/// Embeds audio by per-band log-mel mean and standard deviation, projected
/// to 256 dimensions by a fixed random matrix.
#[derive(Debug)]
pub struct SpectralSpeakerEmbedder {
    extractor: MelExtractor,
    projection: Array2<f64>,
}

impl Default for SpectralSpeakerEmbedder {
    fn default() -> Self {
        Self::new(PROJECTION_SEED)
    }
}

impl SpectralSpeakerEmbedder {
    pub fn new(projection_seed: u64) -> Self {
        let mut rng = seed::rng(projection_seed, "spectral-projection", 0);
        let scale = (2.0 * N_MELS as f64).sqrt().recip();
        let projection = Array2::from_shape_simple_fn((SPEAKER_DIM, 2 * N_MELS), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            extractor: MelExtractor::default(),
            projection,
        }
    }

    /// Requires at least one second of 16 kHz audio.
    pub fn embed_clip(&self, speaker_id: &str, clip: &AudioClip) -> Result<SpeakerEmbedding> {
        if clip.len() < SAMPLE_RATE as usize {
            return Err(Error::SpeakerClipTooShort(clip.len()));
        }
        self.embed_log_mel(speaker_id, &self.extractor.log_mel(clip)?)
    }

    /// Embed from natural-log mel frames `F x 80`.
    pub fn embed_log_mel(&self, speaker_id: &str, log_mel: &Array2<f64>) -> Result<SpeakerEmbedding> {
        if log_mel.ncols() != N_MELS || log_mel.nrows() == 0 {
            return Err(Error::Shape(format!(
                "log-mel of shape {:?}, expected F x {N_MELS}",
                log_mel.dim()
            )));
        }
        let mean = log_mel.mean_axis(Axis(0)).expect("non-empty");
        let std = log_mel.std_axis(Axis(0), 0.0);
        let mut stats = Array1::zeros(2 * N_MELS);
        stats.slice_mut(ndarray::s![..N_MELS]).assign(&mean);
        stats.slice_mut(ndarray::s![N_MELS..]).assign(&std);
        let v = self.projection.dot(&stats);
        SpeakerEmbedding::normalized(speaker_id, v.as_slice().expect("contiguous"))
    }
}

/// Random one-second window of `clip`.
pub fn random_segment(clip: &AudioClip, rng: &mut impl Rng) -> Result<AudioClip> {
    let need = SAMPLE_RATE as usize;
    if clip.len() < need {
        return Err(Error::SpeakerClipTooShort(clip.len()));
    }
    let start = rng.random_range(0..=clip.len() - need);
    AudioClip::new(clip.samples()[start..start + need].to_vec(), clip.sample_rate())
}
