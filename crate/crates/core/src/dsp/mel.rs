use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AudioClip, MelSpectrogram, Stft, F_MAX, F_MIN, LOG_FLOOR, N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    } else {
        mel * F_SP
    }
}

/// Triangular, area-normalized mel filterbank of shape `n_mels x (n_fft/2 + 1)`.
pub fn mel_filterbank(
    sample_rate: u32,
    n_fft: usize,
    n_mels: usize,
    f_min: f64,
    f_max: f64,
) -> Result<Array2<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_mels == 0 {
        return Err(Error::Filterbank("n_mels must be at least 1".into()));
    }
    if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
        return Err(Error::Filterbank(format!(
            "need 0 <= f_min < f_max <= {nyquist}, got [{f_min}, {f_max}]"
        )));
    }
    let bins = n_fft / 2 + 1;
    if n_mels > bins {
        return Err(Error::Filterbank(format!(
            "{n_mels} mel bands exceed {bins} FFT bins"
        )));
    }
    let fft_freqs: Vec<f64> = (0..bins)
        .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
        .collect();
    let (mel_lo, mel_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut fb = Array2::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let lower = (f - lo) / (centre - lo);
            let upper = (hi - f) / (hi - centre);
            let w = lower.min(upper).max(0.0);
            fb[[m, k]] = w * norm;
        }
        if fb.row(m).sum() <= 0.0 {
            return Err(Error::Filterbank(format!(
                "band {m} ({lo:.1}-{hi:.1} Hz) contains no FFT bin"
            )));
        }
    }
    Ok(fb)
}

/// Affine map between natural-log mel values and the `[0, 1]` range the
/// model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelNormalization {
    pub log_min: f64,
    pub log_max: f64,
}

impl Default for MelNormalization {
    fn default() -> Self {
        Self {
            log_min: LOG_FLOOR.ln(),
            log_max: 2.0,
        }
    }
}

impl MelNormalization {
    /// Min/max over a set of log-mel matrices.
    pub fn fit<'a>(logs: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for m in logs {
            for &v in m {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Shape("no log-mel values to fit".into()));
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        Ok(Self {
            log_min: lo,
            log_max: hi,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.log_min.is_finite() && self.log_max.is_finite() && self.log_max > self.log_min) {
            return Err(Error::Manifest(format!(
                "invalid mel normalization [{}, {}]",
                self.log_min, self.log_max
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, log_mel: f64) -> f64 {
        ((log_mel - self.log_min) / (self.log_max - self.log_min)).clamp(0.0, 1.0)
    }

    pub fn denormalize(&self, value: f64) -> f64 {
        self.log_min + value * (self.log_max - self.log_min)
    }
}

/// STFT + filterbank at the pipeline's fixed settings.
#[derive(Debug)]
pub struct MelExtractor {
    stft: Stft,
    filterbank: Array2<f64>,
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self {
            stft: Stft::default(),
            filterbank: mel_filterbank(SAMPLE_RATE, super::N_FFT, N_MELS, F_MIN, F_MAX)
                .expect("standard filterbank is feasible"),
        }
    }
}

impl MelExtractor {
    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    /// Mel energies (amplitude) of linear magnitude frames `F x bins`.
    pub fn mel_energies(&self, magnitudes: &Array2<f64>) -> Array2<f64> {
        magnitudes.dot(&self.filterbank.t())
    }

    /// Natural-log mel frames with the `1e-5` floor, `F x 80`.
    pub fn log_mel(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        clip.require_16k()?;
        let spec = self.stft.forward(clip)?;
        Ok(self
            .mel_energies(&spec.magnitudes)
            .mapv(|e| e.max(LOG_FLOOR).ln()))
    }

    pub fn melspectrogram(
        &self,
        clip: &AudioClip,
        norm: &MelNormalization,
    ) -> Result<MelSpectrogram> {
        let logs = self.log_mel(clip)?;
        MelSpectrogram::new(logs.mapv(|v| norm.normalize(v) as f32))
    }

    /// Column sums of the filterbank, one per FFT bin.
    #[cfg(test)]
    pub(crate) fn bin_coverage(&self) -> Vec<f64> {
        self.filterbank.sum_axis(ndarray::Axis(0)).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn slaney_scale_round_trips() {
        for hz in [0.0, 300.0, 999.0, 1000.0, 4321.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn standard_filterbank_structure() {
        let fb = mel_filterbank(16000, 512, 80, 0.0, 8000.0).unwrap();
        assert_eq!(fb.dim(), (80, 257));
        let mut last_peak = None;
        for row in fb.rows() {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.sum() > 0.0);
            let support: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            let (first, last) = (support[0], *support.last().unwrap());
            assert_eq!(support.len(), last - first + 1, "support must be contiguous");
            let peak = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            if let Some(p) = last_peak {
                assert!(peak >= p);
            }
            last_peak = Some(peak);
        }
        // every interior bin is covered
        let ex = MelExtractor::default();
        let cov = ex.bin_coverage();
        for (k, &c) in cov.iter().enumerate().take(256).skip(1) {
            assert!(c > 0.0, "bin {k} uncovered");
        }
    }

    #[test]
    fn centre_frequencies_strictly_increase() {
        let lo = hz_to_mel(0.0);
        let hi = hz_to_mel(8000.0);
        let centres: Vec<f64> = (1..=80).map(|i| lo + (hi - lo) * i as f64 / 81.0).collect();
        assert!(centres.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn bins_below_f_min_get_no_weight() {
        let fb = mel_filterbank(16000, 512, 40, 300.0, 8000.0).unwrap();
        for k in 0..257 {
            let f = k as f64 * 16000.0 / 512.0;
            if f < 300.0 {
                assert!(fb.column(k).iter().all(|&w| w == 0.0), "bin {k}");
            }
        }
    }

    #[test]
    fn infeasible_filterbanks_are_rejected() {
        assert!(mel_filterbank(16000, 512, 300, 0.0, 8000.0).is_err());
        assert!(mel_filterbank(16000, 512, 200, 0.0, 8000.0).is_err());
        assert!(mel_filterbank(16000, 512, 10, 500.0, 400.0).is_err());
        assert!(mel_filterbank(16000, 512, 10, 0.0, 9000.0).is_err());
        assert!(mel_filterbank(16000, 512, 0, 0.0, 8000.0).is_err());
    }

    #[test]
    fn zero_clip_sits_on_the_log_floor() {
        let ex = MelExtractor::default();
        let clip = AudioClip::at_16k(vec![0.0; 16000]).unwrap();
        let logs = ex.log_mel(&clip).unwrap();
        assert_eq!(logs.dim(), (101, 80));
        assert!(logs.iter().all(|&v| v == LOG_FLOOR.ln()));
        let mel = ex.melspectrogram(&clip, &MelNormalization::default()).unwrap();
        assert!(mel.frames().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn phase_shift_does_not_change_mel() {
        let ex = MelExtractor::default();
        let norm = MelNormalization::default();
        let make = |phi: f64| {
            let s = (0..16000)
                .map(|n| 0.5 * (2.0 * PI * 1000.0 * n as f64 / 16000.0 + phi).sin())
                .collect();
            AudioClip::at_16k(s).unwrap()
        };
        let a = ex.log_mel(&make(0.0)).unwrap().mapv(f64::exp);
        let b = ex.log_mel(&make(1.234)).unwrap().mapv(f64::exp);
        // Interior frames: only window leakage of the negative-frequency
        // image depends on phase, far below the energy of the tone.
        let peak = a.iter().cloned().fold(0.0, f64::max);
        let mut worst = 0.0f64;
        for t in 2..99 {
            for m in 0..80 {
                worst = worst.max((a[[t, m]] - b[[t, m]]).abs());
            }
        }
        assert!(worst < 1e-4 * peak);
        let _ = ex.melspectrogram(&make(0.3), &norm).unwrap();
    }

    #[test]
    fn rejects_other_sample_rates() {
        let ex = MelExtractor::default();
        let clip = AudioClip::new(vec![0.0; 100], 8000).unwrap();
        assert!(matches!(ex.log_mel(&clip), Err(Error::SampleRate(8000))));
    }
}
