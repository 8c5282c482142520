//! On-disk formats: 16-bit mono WAV and little-endian float32 matrices with
//! a `(rows, cols)` u32 header.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{AudioClip, MelSpectrogram, N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in clip.samples() {
        w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Shape(format!(
            "expected mono 16-bit PCM, got {} channels / {} bits",
            spec.channels, spec.bits_per_sample
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate(spec.sample_rate));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / i16::MAX as f64))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    AudioClip::at_16k(samples)
}

pub fn encode_matrix(m: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * m.len());
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for &v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode a headed float32 matrix; `None` if the payload is truncated,
/// oversized or the column count differs from `expect_cols`.
pub fn decode_matrix(bytes: &[u8], expect_cols: Option<usize>) -> Option<Array2<f32>> {
    if bytes.len() < 8 {
        return None;
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().ok()?) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().ok()?) as usize;
    if expect_cols.is_some_and(|c| c != cols) {
        return None;
    }
    let body = &bytes[8..];
    if body.len() != rows.checked_mul(cols)?.checked_mul(4)? {
        return None;
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), data).ok()
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f32>) -> Result<()> {
    fs::write(path, encode_matrix(m))?;
    Ok(())
}

/// Read a headed float32 matrix, optionally requiring `cols` columns.
pub fn read_matrix(path: impl AsRef<Path>, cols: Option<usize>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    decode_matrix(&fs::read(path)?, cols).ok_or_else(|| Error::Corrupt {
        kind: "matrix",
        utterance: path.display().to_string(),
    })
}

pub fn write_mel(path: impl AsRef<Path>, mel: &MelSpectrogram) -> Result<()> {
    write_matrix(path, mel.frames())
}

pub fn read_mel(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let m = decode_matrix(&bytes, Some(N_MELS)).ok_or_else(|| Error::Corrupt {
        kind: "mel",
        utterance: path.display().to_string(),
    })?;
    MelSpectrogram::new(m)
}

pub fn encode_f32s(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn decode_f32s(bytes: &[u8]) -> Option<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

pub fn encode_u32s(v: &[u32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn decode_u32s(bytes: &[u8]) -> Option<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}
