//! Signal processing: STFT/ISTFT, mel filterbank, log-mel extraction and
//! Griffin-Lim inversion.
//!
//! All framing is fixed to 16 kHz audio with a 25 ms (400 sample) periodic
//! Hann window, 10 ms (160 sample) hop and a 512-point FFT. Frames are
//! centred with reflection padding, so a clip of `L` samples yields
//! `1 + L / 160` frames.

mod griffin_lim;
pub mod io;
mod mel;
mod stft;

use ndarray::Array2;

use crate::error::{Error, Result};

pub use griffin_lim::{GriffinLim, GriffinLimTrace, DEFAULT_ITERATIONS};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelExtractor, MelNormalization};
pub use stft::{Spectrogram, Stft};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 512;
pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const N_MELS: usize = 80;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8_000.0;
/// Floor applied to mel energies before the natural log.
pub const LOG_FLOOR: f64 = 1e-5;

/// Mono audio with finite samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSample(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// 16 kHz clip, the only rate the synthesis pipeline accepts.
    pub fn at_16k(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub(crate) fn require_16k(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate(self.sample_rate));
        }
        Ok(())
    }
}

/// `F x 80` log-mel frames, normalized to `[0, 1]` unless stated otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: Array2<f32>,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f32>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::Shape("mel spectrogram has no frames".into()));
        }
        if frames.ncols() != N_MELS {
            return Err(Error::Shape(format!(
                "mel spectrogram has {} bands, expected {N_MELS}",
                frames.ncols()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("mel spectrogram has non-finite entries".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Array2<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f32> {
        self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Frame count produced by the centred STFT for a clip of `len` samples.
pub fn frame_count(len: usize, hop_length: usize) -> usize {
    1 + len / hop_length
}
