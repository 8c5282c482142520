use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Zip};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{AudioClip, HOP_LENGTH, N_FFT, WIN_LENGTH};
use crate::error::{Error, Result};

/// Magnitude and phase of a one-sided STFT, `F x (n_fft/2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub magnitudes: Array2<f64>,
    pub phase: Array2<f64>,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.magnitudes.nrows()
    }

    pub fn to_complex(&self) -> Result<Array2<Complex64>> {
        if self.magnitudes.dim() != self.phase.dim() {
            return Err(Error::Shape(format!(
                "magnitudes {:?} vs phase {:?}",
                self.magnitudes.dim(),
                self.phase.dim()
            )));
        }
        let mut out = Array2::zeros(self.magnitudes.dim());
        Zip::from(&mut out)
            .and(&self.magnitudes)
            .and(&self.phase)
            .for_each(|o, &m, &p| *o = Complex64::from_polar(m, p));
        Ok(out)
    }
}

/// Centred short-time Fourier transform with a periodic Hann window.
///
/// The inverse is the exact least-squares inverse of the forward map,
/// including the reflection padding at both ends, so `inverse(forward(x))`
/// recovers `x` to rounding error and Griffin-Lim iterations built on this
/// pair never increase the spectral distance.
pub struct Stft {
    n_fft: usize,
    win_length: usize,
    hop_length: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("n_fft", &self.n_fft)
            .field("win_length", &self.win_length)
            .field("hop_length", &self.hop_length)
            .finish()
    }
}

impl Default for Stft {
    fn default() -> Self {
        Self::new(N_FFT, WIN_LENGTH, HOP_LENGTH).expect("standard framing is valid")
    }
}

impl Stft {
    pub fn new(n_fft: usize, win_length: usize, hop_length: usize) -> Result<Self> {
        if hop_length == 0 || win_length == 0 {
            return Err(Error::Framing("window and hop must be positive".into()));
        }
        if win_length > n_fft {
            return Err(Error::Framing(format!(
                "win_length {win_length} exceeds n_fft {n_fft}"
            )));
        }
        if hop_length > win_length {
            return Err(Error::Framing(format!(
                "hop_length {hop_length} exceeds win_length {win_length}"
            )));
        }
        let offset = (n_fft - win_length) / 2;
        let mut window = vec![0.0; n_fft];
        for n in 0..win_length {
            window[offset + n] = 0.5 - 0.5 * (2.0 * PI * n as f64 / win_length as f64).cos();
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n_fft,
            win_length,
            hop_length,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn win_length(&self) -> usize {
        self.win_length
    }

    pub fn hop_length(&self) -> usize {
        self.hop_length
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, len: usize) -> usize {
        super::frame_count(len, self.hop_length)
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn forward(&self, clip: &AudioClip) -> Result<Spectrogram> {
        let spec = self.forward_complex(clip.samples())?;
        Ok(Spectrogram {
            magnitudes: spec.mapv(|c| c.norm()),
            phase: spec.mapv(|c| c.arg()),
        })
    }

    pub fn forward_complex(&self, samples: &[f64]) -> Result<Array2<Complex64>> {
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSample(i));
        }
        let len = samples.len();
        let frames = self.n_frames(len);
        let pad = (self.n_fft / 2) as isize;
        let bins = self.n_bins();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            let start = (t * self.hop_length) as isize - pad;
            for (j, b) in buf.iter_mut().enumerate() {
                let w = self.window[j];
                *b = if w == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(samples[reflect(start + j as isize, len)] * w, 0.0)
                };
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                out[[t, k]] = buf[k];
            }
        }
        Ok(out)
    }

    /// Least-squares signal of `length` samples whose STFT is closest to `spec`.
    pub fn inverse_complex(&self, spec: &Array2<Complex64>, length: usize) -> Result<Vec<f64>> {
        let (frames, bins) = spec.dim();
        if bins != self.n_bins() {
            return Err(Error::Shape(format!(
                "spectrum has {bins} bins, framing expects {}",
                self.n_bins()
            )));
        }
        if frames == 0 || length == 0 {
            return Err(Error::EmptyAudio);
        }
        let n = self.n_fft;
        let pad = (n / 2) as isize;
        let padded = (frames - 1) * self.hop_length + n;
        let mut num = vec![0.0; padded];
        let mut den = vec![0.0; padded];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let scale = 1.0 / n as f64;
        for t in 0..frames {
            buf[0] = spec[[t, 0]];
            for k in 1..bins {
                let z = spec[[t, k]];
                buf[k] = z;
                if k < n - k {
                    buf[n - k] = z.conj();
                }
            }
            self.inverse.process(&mut buf);
            let base = t * self.hop_length;
            for j in 0..n {
                let w = self.window[j];
                if w != 0.0 {
                    num[base + j] += w * buf[j].re * scale;
                    den[base + j] += w * w;
                }
            }
        }
        let mut x_num = vec![0.0; length];
        let mut x_den = vec![0.0; length];
        for p in 0..padded {
            if den[p] == 0.0 {
                continue;
            }
            let i = reflect(p as isize - pad, length);
            x_num[i] += num[p];
            x_den[i] += den[p];
        }
        Ok(x_num
            .iter()
            .zip(&x_den)
            .map(|(&a, &b)| if b > 1e-12 { a / b } else { 0.0 })
            .collect())
    }

    /// Inverse of [`Stft::forward`]. Without `length` the output has
    /// `(F - 1) * hop` samples.
    pub fn inverse(
        &self,
        magnitudes: &Array2<f64>,
        phase: &Array2<f64>,
        length: Option<usize>,
    ) -> Result<AudioClip> {
        let spec = Spectrogram {
            magnitudes: magnitudes.clone(),
            phase: phase.clone(),
        }
        .to_complex()?;
        let frames = spec.nrows();
        let length = length.unwrap_or_else(|| (frames.max(1) - 1) * self.hop_length).max(1);
        AudioClip::at_16k(self.inverse_complex(&spec, length)?)
    }
}

/// Index into a signal of `len` samples under symmetric reflection
/// (edge sample not repeated).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}
