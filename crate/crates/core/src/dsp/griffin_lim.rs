use ndarray::{s, Array2, Zip};
use rustfft::num_complex::Complex64;

use super::{AudioClip, MelExtractor, MelNormalization, MelSpectrogram};
use crate::error::{Error, Result};

pub const DEFAULT_ITERATIONS: usize = 60;

/// Output of a Griffin-Lim run with the per-iteration spectral convergence
/// `|| |STFT(x_k)| - S || / ||S||`, measured over the two-sided spectrum.
#[derive(Debug, Clone)]
pub struct GriffinLimTrace {
    pub clip: AudioClip,
    pub spectral_convergence: Vec<f64>,
}

/// Mel-to-waveform inversion: pseudo-inverse of the filterbank followed by
/// Griffin-Lim phase retrieval from a zero-phase start.
#[derive(Debug)]
pub struct GriffinLim {
    extractor: MelExtractor,
    pinv: Array2<f64>,
    norm: MelNormalization,
    iterations: usize,
}

impl GriffinLim {
    pub fn new(norm: MelNormalization, iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Framing("griffin-lim needs at least one iteration".into()));
        }
        norm.validate()?;
        let extractor = MelExtractor::default();
        let pinv = pseudo_inverse(extractor.filterbank())?;
        Ok(Self {
            extractor,
            pinv,
            norm,
            iterations,
        })
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Linear magnitudes implied by a normalized mel, clamped at zero.
    /// One extra trailing frame (a copy of the last) covers the final hop so
    /// the waveform spans exactly `F * hop` samples.
    pub fn linear_magnitudes(&self, mel: &MelSpectrogram) -> Array2<f64> {
        let frames = mel.frames();
        let energies = frames.mapv(|v| self.norm.denormalize(v as f64).exp());
        let lin = energies.dot(&self.pinv.t()).mapv(|m| m.max(0.0));
        let f = lin.nrows();
        let mut out = Array2::zeros((f + 1, lin.ncols()));
        out.slice_mut(s![..f, ..]).assign(&lin);
        out.row_mut(f).assign(&lin.row(f - 1));
        out
    }

    pub fn reconstruct(&self, mel: &MelSpectrogram) -> Result<AudioClip> {
        Ok(self.reconstruct_with_trace(mel)?.clip)
    }

    pub fn reconstruct_with_trace(&self, mel: &MelSpectrogram) -> Result<GriffinLimTrace> {
        let stft = self.extractor.stft();
        let target = self.linear_magnitudes(mel);
        let length = mel.n_frames() * stft.hop_length();
        let weights = bin_weights(target.ncols());
        let target_norm = weighted_norm(&target, &weights);

        let mut spec = target.mapv(|m| Complex64::new(m, 0.0));
        let mut trace = Vec::with_capacity(self.iterations);
        let mut samples = Vec::new();
        for _ in 0..self.iterations {
            samples = stft.inverse_complex(&spec, length)?;
            let rebuilt = stft.forward_complex(&samples)?;
            debug_assert_eq!(rebuilt.dim(), target.dim());
            let mut err = 0.0;
            Zip::indexed(&rebuilt)
                .and(&target)
                .for_each(|(_, k), y, &m| err += weights[k] * (y.norm() - m).powi(2));
            trace.push(if target_norm > 0.0 {
                err.sqrt() / target_norm
            } else {
                0.0
            });
            Zip::from(&mut spec)
                .and(&rebuilt)
                .and(&target)
                .for_each(|z, y, &m| {
                    let r = y.norm();
                    *z = if r > 0.0 {
                        *y * (m / r)
                    } else {
                        Complex64::new(m, 0.0)
                    };
                });
        }
        Ok(GriffinLimTrace {
            clip: AudioClip::at_16k(samples)?,
            spectral_convergence: trace,
        })
    }
}

fn bin_weights(bins: usize) -> Vec<f64> {
    (0..bins)
        .map(|k| if k == 0 || k == bins - 1 { 1.0 } else { 2.0 })
        .collect()
}

fn weighted_norm(m: &Array2<f64>, weights: &[f64]) -> f64 {
    let mut acc = 0.0;
    Zip::indexed(m).for_each(|(_, k), &v| acc += weights[k] * v * v);
    acc.sqrt()
}

/// Moore-Penrose pseudo-inverse of a full-row-rank `m x n` matrix,
/// `A^T (A A^T)^-1`, returned as `n x m`.
fn pseudo_inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    let gram = a.dot(&a.t());
    let l = cholesky(&gram)?;
    let m = a.nrows();
    let n = a.ncols();
    let mut out = Array2::zeros((n, m));
    // solve (L L^T) x = a[:, j] for each column j
    for j in 0..n {
        let mut y = vec![0.0; m];
        for i in 0..m {
            let mut v = a[[i, j]];
            for k in 0..i {
                v -= l[[i, k]] * y[k];
            }
            y[i] = v / l[[i, i]];
        }
        for i in (0..m).rev() {
            let mut v = y[i];
            for k in i + 1..m {
                v -= l[[k, i]] * y[k];
            }
            y[i] = v / l[[i, i]];
        }
        for i in 0..m {
            out[[j, i]] = y[i];
        }
    }
    Ok(out)
}

fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Filterbank("filterbank is rank deficient".into()));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine_clip(freq: f64, amp: f64, len: usize) -> AudioClip {
        AudioClip::at_16k(
            (0..len)
                .map(|n| amp * (2.0 * PI * freq * n as f64 / 16000.0).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pseudo_inverse_is_a_right_inverse() {
        let ex = MelExtractor::default();
        let fb = ex.filterbank();
        let p = pseudo_inverse(fb).unwrap();
        let eye = fb.dot(&p);
        for i in 0..80 {
            for j in 0..80 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((eye[[i, j]] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn recovers_dominant_frequency_of_a_sine() {
        let norm = MelNormalization::default();
        let ex = MelExtractor::default();
        let mel = ex.melspectrogram(&sine_clip(1000.0, 0.5, 16000), &norm).unwrap();
        let gl = GriffinLim::new(norm, DEFAULT_ITERATIONS).unwrap();
        let out = gl.reconstruct(&mel).unwrap();
        assert_eq!(out.len(), mel.n_frames() * 160);
        let spec = ex.stft().forward(&out).unwrap();
        let mean = spec.magnitudes.mean_axis(ndarray::Axis(0)).unwrap();
        let peak = (0..mean.len())
            .max_by(|&a, &b| mean[a].partial_cmp(&mean[b]).unwrap())
            .unwrap();
        assert!((peak as i64 - 32).abs() <= 1, "peak bin {peak}");
    }

    #[test]
    fn silence_stays_silent() {
        let norm = MelNormalization::default();
        let mel = MelSpectrogram::new(Array2::zeros((50, 80))).unwrap();
        let out = GriffinLim::new(norm, 10).unwrap().reconstruct(&mel).unwrap();
        assert!(out.rms() < 1e-3, "rms {}", out.rms());
    }

    #[test]
    fn spectral_convergence_never_increases() {
        let norm = MelNormalization::default();
        let ex = MelExtractor::default();
        let mut s: Vec<f64> = sine_clip(440.0, 0.3, 8000).into_samples();
        for (n, v) in s.iter_mut().enumerate() {
            *v += 0.2 * (2.0 * PI * 2300.0 * n as f64 / 16000.0).sin() * (n as f64 / 8000.0);
        }
        let mel = ex
            .melspectrogram(&AudioClip::at_16k(s).unwrap(), &norm)
            .unwrap();
        let trace = GriffinLim::new(norm, 40)
            .unwrap()
            .reconstruct_with_trace(&mel)
            .unwrap();
        for w in trace.spectral_convergence.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
        }
        assert!(trace.spectral_convergence.last() < trace.spectral_convergence.first());
    }

    #[test]
    fn deterministic_output() {
        let norm = MelNormalization::default();
        let mel = MelSpectrogram::new(Array2::from_shape_fn((20, 80), |(t, m)| {
            ((t * 7 + m * 3) % 17) as f32 / 17.0
        }))
        .unwrap();
        let gl = GriffinLim::new(norm, 8).unwrap();
        let a = gl.reconstruct(&mel).unwrap();
        let b = gl.reconstruct(&mel).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn zero_iterations_rejected() {
        assert!(GriffinLim::new(MelNormalization::default(), 0).is_err());
    }
}
