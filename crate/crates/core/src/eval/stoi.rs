//! Short-time objective intelligibility, numerically matching the widely
//! used `pystoi` implementation: octave-compatible polyphase resampling to
//! 10 kHz, 40 dB silent-frame removal, 15 third-octave bands from 150 Hz and
//! 30-frame (384 ms) analysis segments.

use std::sync::OnceLock;

use ndarray::{s, Array2, ArrayView2};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

pub const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
/// Frames per analysis segment.
pub const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// Classic STOI (`extended = false`) or ESTOI.
pub fn stoi(reference: &AudioClip, degraded: &AudioClip, extended: bool) -> Result<f64> {
    if reference.sample_rate() != degraded.sample_rate() {
        return Err(Error::SampleRate(degraded.sample_rate()));
    }
    if reference.len() != degraded.len() {
        return Err(Error::Shape(format!(
            "stoi inputs differ in length: {} vs {}",
            reference.len(),
            degraded.len()
        )));
    }
    let (x, y) = if reference.sample_rate() == STOI_RATE {
        (reference.samples().to_vec(), degraded.samples().to_vec())
    } else {
        let (p, q) = reduce(STOI_RATE as usize, reference.sample_rate() as usize);
        let h = octave_window(p, q);
        (resample_poly(reference.samples(), p, q, &h), resample_poly(degraded.samples(), p, q, &h))
    };
    let (x, y) = remove_silent_frames(&x, &y).ok_or(Error::StoiTooShort)?;
    let xs = third_octave(&spectrogram(&x));
    let ys = third_octave(&spectrogram(&y));
    let frames = xs.ncols();
    if frames < SEGMENT {
        return Err(Error::StoiTooShort);
    }
    let n_seg = frames - SEGMENT + 1;
    let mut total = 0.0;
    for m in 0..n_seg {
        let xw = xs.slice(s![.., m..m + SEGMENT]);
        let yw = ys.slice(s![.., m..m + SEGMENT]);
        total += if extended {
            estoi_segment(xw, yw)
        } else {
            stoi_segment(xw, yw)
        };
    }
    Ok(if extended {
        total / n_seg as f64
    } else {
        total / (n_seg * BANDS) as f64
    })
}

/// Sum over bands of the clipped, normalized correlation.
fn stoi_segment(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let clip = 10f64.powf(-BETA_DB / 20.0);
    let mut sum = 0.0;
    for (xr, yr) in x.rows().into_iter().zip(y.rows()) {
        let xn = norm(xr.iter().copied());
        let yn = norm(yr.iter().copied());
        let scale = xn / (yn + EPS);
        let yp: Vec<f64> = yr
            .iter()
            .zip(xr.iter())
            .map(|(&b, &a)| (b * scale).min(a * (1.0 + clip)))
            .collect();
        let ym = yp.iter().sum::<f64>() / SEGMENT as f64;
        let xm = xr.sum() / SEGMENT as f64;
        let yc: Vec<f64> = yp.iter().map(|v| v - ym).collect();
        let xc: Vec<f64> = xr.iter().map(|v| v - xm).collect();
        let yd = norm(yc.iter().copied()) + EPS;
        let xd = norm(xc.iter().copied()) + EPS;
        sum += yc.iter().zip(&xc).map(|(a, b)| (a / yd) * (b / xd)).sum::<f64>();
    }
    sum
}

fn estoi_segment(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let xn = row_col_normalize(x);
    let yn = row_col_normalize(y);
    (&xn * &yn).sum() / SEGMENT as f64
}

/// Zero-mean, unit-norm each band over time, then each frame over bands.
fn row_col_normalize(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.mean().unwrap();
        row.mapv_inplace(|v| v - m);
        let inv = 1.0 / norm(row.iter().copied());
        row.mapv_inplace(|v| v * inv);
    }
    for mut col in out.columns_mut() {
        let m = col.mean().unwrap();
        col.mapv_inplace(|v| v - m);
        let inv = 1.0 / norm(col.iter().copied());
        col.mapv_inplace(|v| v * inv);
    }
    out
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|a| a * a).sum::<f64>().sqrt()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn reduce(p: usize, q: usize) -> (usize, usize) {
    let g = gcd(p, q);
    (p / g, q / g)
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(len: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let m = (len - 1) as f64;
    (0..len)
        .map(|n| {
            let r = 2.0 * n as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser-windowed sinc lowpass as built by Octave's `resample`, scaled to
/// unit DC gain.
fn octave_window(p: usize, q: usize) -> Vec<f64> {
    let rejection_db = 60.0;
    let cutoff = 1.0 / (2 * p.max(q)) as f64;
    let roll_off = cutoff / 10.0;
    let half = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as usize;
    let beta = 0.1102 * (rejection_db - 8.7);
    let win = kaiser(2 * half + 1, beta);
    let h: Vec<f64> = (0..2 * half + 1)
        .map(|i| {
            let t = i as f64 - half as f64;
            win[i] * 2.0 * p as f64 * cutoff * sinc(2.0 * cutoff * t)
        })
        .collect();
    let total: f64 = h.iter().sum();
    h.into_iter().map(|v| v / total).collect()
}

/// Polyphase rational resampling by `p / q` with an odd-length filter
/// centred on each output sample, zero-extended at both ends.
fn resample_poly(x: &[f64], p: usize, q: usize, window: &[f64]) -> Vec<f64> {
    let half = (window.len() - 1) / 2;
    let h: Vec<f64> = window.iter().map(|v| v * p as f64).collect();
    let n_out = (x.len() * p).div_ceil(q);
    let pre_pad = q - half % q;
    let pre_remove = (half + pre_pad) / q;
    // filter tap k of the padded filter is h[k - pre_pad]
    (0..n_out)
        .map(|i| {
            let m = ((i + pre_remove) * q) as isize;
            let mut acc = 0.0;
            let lo = (m - (pre_pad + h.len()) as isize + 1).max(0);
            let mut n = (lo as usize).div_ceil(p);
            while n < x.len() && (n * p) as isize <= m {
                let k = m as usize - n * p;
                if k >= pre_pad && k - pre_pad < h.len() {
                    acc += h[k - pre_pad] * x[n];
                }
                n += 1;
            }
            acc
        })
        .collect()
}

/// `hanning(FRAME + 2)` without its zero endpoints.
fn window() -> &'static [f64] {
    static W: OnceLock<Vec<f64>> = OnceLock::new();
    W.get_or_init(|| {
        let m = (FRAME + 1) as f64;
        (1..=FRAME)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / m).cos())
            .collect()
    })
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME)).step_by(FRAME / 2)
}

/// Drop frames more than 40 dB below the loudest reference frame and
/// overlap-add the rest; `None` if the clip holds no full frame.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let w = window();
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    if starts.is_empty() {
        return None;
    }
    let energy: Vec<f64> = starts
        .iter()
        .map(|&i| 20.0 * (norm((0..FRAME).map(|j| w[j] * x[i + j])) + EPS).log10())
        .collect();
    let peak = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, &e)| peak - DYN_RANGE_DB - e < 0.0)
        .map(|(&i, _)| i)
        .collect();
    let hop = FRAME / 2;
    let len = (kept.len() - 1) * hop + FRAME;
    let (mut xo, mut yo) = (vec![0.0; len], vec![0.0; len]);
    for (k, &i) in kept.iter().enumerate() {
        for j in 0..FRAME {
            xo[k * hop + j] += w[j] * x[i + j];
            yo[k * hop + j] += w[j] * y[i + j];
        }
    }
    Some((xo, yo))
}

/// `NFFT/2 + 1` by frames power spectrogram.
fn spectrogram(x: &[f64]) -> Array2<f64> {
    let w = window();
    let fft = FftPlanner::new().plan_fft_forward(NFFT);
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let bins = NFFT / 2 + 1;
    let mut out = Array2::zeros((bins, starts.len()));
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    for (f, &i) in starts.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for j in 0..FRAME {
            buf[j].re = w[j] * x[i + j];
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[[k, f]] = buf[k].norm_sqr();
        }
    }
    out
}

/// Band edges `[lo, hi)` in FFT bins, each snapped to the nearest bin.
fn band_edges() -> &'static [(usize, usize)] {
    static E: OnceLock<Vec<(usize, usize)>> = OnceLock::new();
    E.get_or_init(|| {
        let bins = NFFT / 2 + 1;
        let f: Vec<f64> = (0..bins).map(|k| k as f64 * STOI_RATE as f64 / NFFT as f64).collect();
        let nearest = |target: f64| {
            let mut best = 0;
            for k in 1..bins {
                if (f[k] - target).powi(2) < (f[best] - target).powi(2) {
                    best = k;
                }
            }
            best
        };
        (0..BANDS)
            .map(|b| {
                let k = b as f64;
                let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
                let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
                (nearest(lo), nearest(hi))
            })
            .collect()
    })
}

/// Band envelopes: square root of the summed power in each band.
fn third_octave(power: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((BANDS, power.ncols()));
    for (b, &(lo, hi)) in band_edges().iter().enumerate() {
        for t in 0..power.ncols() {
            out[[b, t]] = power.slice(s![lo..hi, t]).sum().sqrt();
        }
    }
    out
}
