use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::AlignmentMatrix;

/// Sharpness of the diagonality kernel.
pub const DIAGONALITY_KAPPA: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub diagonality: f64,
    pub monotonicity_violations: usize,
    pub frame_accuracy: Option<f64>,
    /// Mean row entropy in nats.
    pub entropy: f64,
}

/// Argmax phoneme of every frame, ties to the lowest index.
pub fn argmax_path(a: &AlignmentMatrix) -> Vec<usize> {
    a.weights()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &w) in row.iter().enumerate() {
                if w > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Path statistics of `a`, plus agreement with a per-frame oracle phoneme
/// index when one is given.
pub fn alignment_diagnostics(a: &AlignmentMatrix, oracle: Option<&[u32]>) -> Result<AlignmentReport> {
    let (t, n) = a.weights().dim();
    let path = argmax_path(a);
    let violations = path.windows(2).filter(|w| w[1] < w[0]).count();
    let diagonality = path
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let ideal = i as f64 * n as f64 / t as f64;
            (-DIAGONALITY_KAPPA * (p as f64 - ideal).abs() / n as f64).exp()
        })
        .sum::<f64>()
        / t as f64;
    let entropy = a
        .weights()
        .rows()
        .into_iter()
        .map(|r| -r.iter().filter(|&&w| w > 0.0).map(|&w| w * w.ln()).sum::<f64>())
        .sum::<f64>()
        / t as f64;
    let frame_accuracy = match oracle {
        None => None,
        Some(o) => {
            if o.len() != t {
                return Err(Error::Shape(format!("oracle has {} frames, alignment {t}", o.len())));
            }
            let hits = path.iter().zip(o).filter(|(&p, &q)| p == q as usize).count();
            Some(hits as f64 / t as f64)
        }
    };
    Ok(AlignmentReport {
        diagonality,
        monotonicity_violations: violations,
        frame_accuracy,
        entropy,
    })
}

/// One row per video frame, one column per phoneme.
pub fn write_alignment_csv(path: impl AsRef<Path>, a: &AlignmentMatrix) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..a.n_phonemes()).map(|j| format!("p{j}")).collect();
    writeln!(w, "frame,{}", header.join(","))?;
    for (t, row) in a.weights().rows().into_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{t},{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Grayscale heatmap, frames down and phonemes across, each cell drawn as
/// a `cell x cell` block with intensity `255 * weight`.
pub fn write_alignment_png(path: impl AsRef<Path>, a: &AlignmentMatrix, cell: usize) -> Result<()> {
    let cell = cell.max(1);
    let (t, n) = a.weights().dim();
    let (width, height) = (n * cell, t * cell);
    let mut pixels = vec![0u8; width * height];
    for y in 0..height {
        for x in 0..width {
            let v = a.weights()[[y / cell, x / cell]];
            pixels[y * width + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(&pixels).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}
