//! Objective scores: mel-domain error, STOI/ESTOI through Griffin-Lim
//! resynthesis, and alignment path diagnostics against the corpus oracle.

mod alignment;
mod stoi;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

pub use alignment::{
    alignment_diagnostics, argmax_path, write_alignment_csv, write_alignment_png, AlignmentReport,
    DIAGONALITY_KAPPA,
};
pub use stoi::{stoi, SEGMENT as STOI_SEGMENT_FRAMES, STOI_RATE};

use crate::dsp::{GriffinLim, MelSpectrogram};
use crate::error::{Error, Result};
use crate::model::{AlignmentMatrix, Checkpoint, VisoTts};
use crate::synthcorpus::{Corpus, Utterance};

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_HEADER: &str = "utt_id,mel_l1,stoi,estoi,diagonality,violations,frame_acc";

fn check_shapes(pred: &MelSpectrogram, target: &MelSpectrogram) -> Result<()> {
    if pred.frames().dim() != target.frames().dim() {
        return Err(Error::Shape(format!(
            "mel shapes differ: {:?} vs {:?}",
            pred.frames().dim(),
            target.frames().dim()
        )));
    }
    Ok(())
}

/// Mean absolute difference over every entry.
pub fn mel_l1(pred: &MelSpectrogram, target: &MelSpectrogram) -> Result<f64> {
    crate::training::l1_loss(pred, target)
}

/// Mean squared difference over every entry.
pub fn mel_l2(pred: &MelSpectrogram, target: &MelSpectrogram) -> Result<f64> {
    check_shapes(pred, target)?;
    let total: f64 = pred
        .frames()
        .iter()
        .zip(target.frames())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(total / pred.frames().len() as f64)
}

/// One-hot alignment of an utterance's oracle frame-to-phoneme map.
pub fn oracle_alignment_matrix(utt: &Utterance) -> Result<AlignmentMatrix> {
    let n = utt.phonemes.len();
    AlignmentMatrix::new(Array2::from_shape_fn((utt.oracle_alignment.len(), n), |(t, j)| {
        if utt.oracle_alignment[t] as usize == j {
            1.0
        } else {
            0.0
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub utt_id: String,
    pub mel_l1: f64,
    pub mel_l2: f64,
    /// NaN when the utterance is shorter than one STOI analysis segment.
    pub stoi: f64,
    pub estoi: f64,
    pub alignment: AlignmentReport,
}

impl ReportRow {
    pub fn csv_line(&self) -> String {
        let a = &self.alignment;
        format!(
            "{},{},{},{},{},{},{}",
            self.utt_id,
            self.mel_l1,
            self.stoi,
            self.estoi,
            a.diagonality,
            a.monotonicity_violations,
            a.frame_accuracy.map_or(String::new(), |v| v.to_string())
        )
    }
}

/// Scores one prediction against its utterance. Both mels are resynthesised
/// with the same vocoder before STOI.
pub fn score_utterance(
    utt: &Utterance,
    pred: &MelSpectrogram,
    alignment: &AlignmentMatrix,
    vocoder: &GriffinLim,
) -> Result<ReportRow> {
    let l1 = mel_l1(pred, &utt.mel)?;
    let l2 = mel_l2(pred, &utt.mel)?;
    let reference = vocoder.reconstruct(&utt.mel)?;
    let degraded = vocoder.reconstruct(pred)?;
    let score = |extended| match stoi(&reference, &degraded, extended) {
        Ok(v) => Ok(v),
        Err(Error::StoiTooShort) => Ok(f64::NAN),
        Err(e) => Err(e),
    };
    Ok(ReportRow {
        utt_id: utt.id.clone(),
        mel_l1: l1,
        mel_l2: l2,
        stoi: score(false)?,
        estoi: score(true)?,
        alignment: alignment_diagnostics(alignment, Some(&utt.oracle_alignment))?,
    })
}

/// Corpus means. STOI means skip utterances too short to score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub utterances: usize,
    pub mel_l1: f64,
    pub mel_l2: f64,
    pub stoi: Option<f64>,
    pub estoi: Option<f64>,
    pub stoi_scored: usize,
    pub diagonality: f64,
    pub violations: f64,
    pub frame_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in v {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    pub fn summary(&self) -> Summary {
        let rows = &self.rows;
        let finite = |f: fn(&ReportRow) -> f64| mean(rows.iter().map(f).filter(|v| v.is_finite()));
        Summary {
            utterances: rows.len(),
            mel_l1: mean(rows.iter().map(|r| r.mel_l1)).unwrap_or(f64::NAN),
            mel_l2: mean(rows.iter().map(|r| r.mel_l2)).unwrap_or(f64::NAN),
            stoi: finite(|r| r.stoi),
            estoi: finite(|r| r.estoi),
            stoi_scored: rows.iter().filter(|r| r.stoi.is_finite()).count(),
            diagonality: mean(rows.iter().map(|r| r.alignment.diagonality)).unwrap_or(f64::NAN),
            violations: mean(rows.iter().map(|r| r.alignment.monotonicity_violations as f64)).unwrap_or(f64::NAN),
            frame_acc: mean(rows.iter().filter_map(|r| r.alignment.frame_accuracy)),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_line());
            s.push('\n');
        }
        s
    }

    /// Writes `report.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(REPORT_FILE), self.to_csv())?;
        let mut w = BufWriter::new(fs::File::create(dir.join(SUMMARY_FILE))?);
        serde_json::to_writer_pretty(&mut w, &self.summary())?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

/// Inference-mode evaluation of `model` on the utterances at `indices`
/// (all of them when `None`), rows in corpus order.
pub fn evaluate_corpus(
    model: &VisoTts<f32>,
    corpus: &Corpus,
    indices: Option<&[usize]>,
    gl_iterations: usize,
) -> Result<EvalReport> {
    crate::training::check_compatible(corpus, model.config())?;
    let vocoder = GriffinLim::new(corpus.mel_normalization(), gl_iterations)?;
    let all: Vec<usize> = (0..corpus.len()).collect();
    let mut rows = Vec::new();
    for &i in indices.unwrap_or(&all) {
        let utt = corpus.load(i)?;
        let (mel, align) = model.infer(&utt.phonemes, &utt.visual, &utt.speaker)?;
        rows.push(score_utterance(&utt, &mel, &align, &vocoder)?);
    }
    Ok(EvalReport { rows })
}

/// Like [`evaluate_corpus`], after checking that the checkpoint was trained
/// with this corpus's vocabulary and normalization.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    indices: Option<&[usize]>,
    gl_iterations: usize,
) -> Result<EvalReport> {
    if checkpoint.meta.vocabulary != corpus.vocabulary().symbols() {
        return Err(Error::CorpusMismatch("checkpoint vocabulary differs from corpus".into()));
    }
    if checkpoint.meta.mel_normalization != corpus.mel_normalization() {
        return Err(Error::CorpusMismatch("checkpoint mel normalization differs from corpus".into()));
    }
    evaluate_corpus(&checkpoint.model()?, corpus, indices, gl_iterations)
}
