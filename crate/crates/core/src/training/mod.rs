//! L1 training with Adam, a warmup / inverse-square-root schedule and
//! resumable checkpoints.
//!
//! All randomness is stateless: the epoch permutation is a function of
//! `(seed, epoch)` and the dropout masks of `(seed, step)`. A run resumed
//! from step `s` therefore replays steps `s + 1..` exactly as the
//! uninterrupted run would.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::model::{packed_targets, Checkpoint, ModelConfig, ModelInput, Moments, ParamStore, VisoTts};
use crate::seed;
use crate::synthcorpus::{Corpus, Utterance};

pub const LOSS_LOG: &str = "loss.csv";
pub const LOSS_LOG_HEADER: &str = "step,lr,loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub base_scale: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 500,
            base_scale: 1.0,
            max_steps: 5000,
            seed: 7,
            checkpoint_every: 1000,
            log_every: 50,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::TrainConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1");
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log_every and checkpoint_every must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.eps > 0.0 && self.base_scale > 0.0 && self.clip_norm > 0.0) {
            return bad("eps, base_scale and clip_norm must be positive");
        }
        Ok(())
    }
}

/// Training position stored with each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainProgress {
    pub step: u64,
    pub config: TrainConfig,
    pub last_loss: f64,
    /// Exponential moving average of the step loss, factor 0.98.
    pub loss_ema: f64,
}

/// `base · d^-1/2 · min(step^-1/2, step · warmup^-3/2)`.
pub fn lr_schedule(step: u64, d: usize, warmup: u64, base_scale: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::TrainConfig("learning-rate schedule starts at step 1".into()));
    }
    if warmup == 0 {
        return Err(Error::TrainConfig("warmup_steps must be at least 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(base_scale * (d as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Mean absolute difference over all entries.
pub fn l1_loss(pred: &MelSpectrogram, target: &MelSpectrogram) -> Result<f64> {
    l1_arrays(pred.frames(), target.frames())
}

pub(crate) fn l1_arrays(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("mel shapes {:?} and {:?}", a.dim(), b.dim())));
    }
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(sum / a.len() as f64)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: Moments,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, config: &TrainConfig) -> Self {
        Self::with_moments(
            config,
            Moments {
                m: params.zeros_like(),
                v: params.zeros_like(),
            },
        )
    }

    pub fn with_moments(config: &TrainConfig, moments: Moments) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            moments,
        }
    }

    pub fn moments(&self) -> &Moments {
        &self.moments
    }

    /// Apply update number `t` (1-based).
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &[Array2<f32>], lr: f64, t: u64) {
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powf(t as f64);
        let c2 = 1.0 - self.beta2.powf(t as f64);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = self.eps as f32;
        for (i, g) in grads.iter().enumerate() {
            let m = self.moments.m.tensor_mut(i);
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.moments.v.tensor_mut(i);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (self.moments.m.tensor(i), self.moments.v.tensor(i));
            let p = params.tensor_mut(i);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= step * m / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm(grads: &[Array2<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [Array2<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Model, optimizer and step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: VisoTts<f32>,
    adam: Adam,
    config: TrainConfig,
    step: u64,
    last_loss: f64,
    loss_ema: f64,
}

impl Trainer {
    pub fn new(model: VisoTts<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(model.params(), &config);
        Ok(Self {
            model,
            adam,
            config,
            step: 0,
            last_loss: f64::NAN,
            loss_ema: f64::NAN,
        })
    }

    /// Continue from a training checkpoint with its stored config.
    pub fn resume(checkpoint: &Checkpoint) -> Result<Self> {
        let progress = checkpoint
            .meta
            .training
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let moments = checkpoint
            .moments
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
        progress.config.validate()?;
        Ok(Self {
            model: checkpoint.model()?,
            adam: Adam::with_moments(&progress.config, moments),
            config: progress.config,
            step: progress.step,
            last_loss: progress.last_loss,
            loss_ema: progress.loss_ema,
        })
    }

    pub fn model(&self) -> &VisoTts<f32> {
        &self.model
    }

    pub fn into_model(self) -> VisoTts<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn progress(&self) -> TrainProgress {
        TrainProgress {
            step: self.step,
            config: self.config.clone(),
            last_loss: self.last_loss,
            loss_ema: self.loss_ema,
        }
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn checkpoint(&self, corpus: &Corpus) -> Checkpoint {
        Checkpoint::new(
            &self.model,
            corpus.mel_normalization(),
            corpus.vocabulary().symbols().to_vec(),
            Some(self.progress()),
            Some(self.adam.moments().clone()),
        )
    }

    /// One forward/backward/update on a packed batch.
    pub fn train_step(&mut self, input: &ModelInput<f32>, targets: &Array2<f32>) -> Result<StepStats> {
        let step = self.step + 1;
        let lr = lr_schedule(step, self.model.config().d, self.config.warmup_steps, self.config.base_scale)?;
        let dropout_seed = seed::derive(self.config.seed, "dropout", step);
        let (loss, mut grads) = self.model.loss_and_grads(input, targets, Some(dropout_seed))?;
        let loss = loss as f64;
        let grad_norm = clip_gradients(&mut grads, self.config.clip_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step, lr, grad_norm });
        }
        self.adam.update(self.model.params_mut(), &grads, lr, step);
        self.step = step;
        self.last_loss = loss;
        self.loss_ema = if self.loss_ema.is_finite() {
            0.98 * self.loss_ema + 0.02 * loss
        } else {
            loss
        };
        Ok(StepStats { step, lr, loss, grad_norm })
    }
}

/// Utterance indices of the batch used at `step` (1-based): each epoch is
/// a fresh permutation cut into consecutive batches, the last possibly
/// short.
pub fn batch_indices(n: usize, batch_size: usize, seed_value: u64, step: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = (step - 1) / per_epoch;
    let k = ((step - 1) % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed_value, "epoch", epoch));
    order[k * batch_size..((k + 1) * batch_size).min(n)].to_vec()
}

/// Inputs and targets for a set of utterances.
pub fn make_batch(utts: &[&Utterance]) -> (ModelInput<f32>, Array2<f32>) {
    (
        ModelInput::from_utterances(utts.iter().copied()),
        packed_targets(utts.iter().copied()),
    )
}

/// Fail early if the corpus cannot feed `config`.
pub fn check_compatible(corpus: &Corpus, config: &ModelConfig) -> Result<()> {
    let m = corpus.manifest();
    let mismatch = |what: &str, a: usize, b: usize| {
        Err(Error::CorpusMismatch(format!("{what}: corpus {a}, model {b}")))
    };
    if corpus.vocabulary().len() != config.vocab_size {
        return mismatch("vocabulary size", corpus.vocabulary().len(), config.vocab_size);
    }
    if m.n_mels != config.mel_bins {
        return mismatch("mel bins", m.n_mels, config.mel_bins);
    }
    if m.visual_dim != config.visual_in {
        return mismatch("visual width", m.visual_dim, config.visual_in);
    }
    if m.speaker_dim != config.speaker_in {
        return mismatch("speaker width", m.speaker_dim, config.speaker_in);
    }
    if m.upsample_n != config.upsample_n {
        return mismatch("upsample factor", m.upsample_n, config.upsample_n);
    }
    if corpus.is_empty() {
        return Err(Error::CorpusMismatch("corpus has no utterances".into()));
    }
    let longest = m.utterances.iter().map(|u| u.n_frames.max(u.n_phonemes)).max().unwrap_or(0);
    if longest > config.max_len {
        return Err(Error::TooLong { len: longest, max_len: config.max_len });
    }
    Ok(())
}

/// Result of [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Stats of every step this call ran.
    pub trace: Vec<StepStats>,
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub model: VisoTts<f32>,
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}"))
}

pub fn final_checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoint")
}

/// Train on every utterance of `corpus` up to `train_config.max_steps`,
/// writing `loss.csv`, periodic checkpoints under `checkpoints/` and the
/// final one under `checkpoint/`. With `resume`, training continues from
/// that checkpoint's step and its stored configuration; log rows past that
/// step are discarded first.
pub fn train_loop(
    train_config: &TrainConfig,
    model_config: &ModelConfig,
    corpus: &Corpus,
    out: impl AsRef<Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let out = out.as_ref();
    train_config.validate()?;
    model_config.validate()?;
    let mut trainer = match resume {
        Some(ck) => {
            if ck.meta.vocabulary != corpus.vocabulary().symbols() {
                return Err(Error::CorpusMismatch("checkpoint vocabulary differs from corpus".into()));
            }
            let mut t = Trainer::resume(ck)?;
            t.config.max_steps = train_config.max_steps;
            t
        }
        None => Trainer::new(VisoTts::new(model_config.clone(), train_config.seed)?, train_config.clone())?,
    };
    check_compatible(corpus, trainer.model().config())?;
    let utts = corpus.load_all()?;
    fs::create_dir_all(out)?;

    let log_path = out.join(LOSS_LOG);
    let mut kept = vec![LOSS_LOG_HEADER.to_string()];
    if resume.is_some() {
        if let Ok(text) = fs::read_to_string(&log_path) {
            kept.extend(text.lines().skip(1).filter(|l| {
                l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= trainer.step())
            }).map(String::from));
        }
    }
    let mut log = fs::File::create(&log_path)?;
    for line in &kept {
        writeln!(log, "{line}")?;
    }

    let cfg = trainer.config().clone();
    let mut trace = Vec::new();
    while trainer.step() < cfg.max_steps {
        let idx = batch_indices(utts.len(), cfg.batch_size, cfg.seed, trainer.step() + 1);
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &utts[i]).collect();
        let (input, targets) = make_batch(&batch);
        let stats = trainer.train_step(&input, &targets)?;
        if stats.step % cfg.log_every == 0 {
            writeln!(log, "{},{},{}", stats.step, stats.lr, stats.loss)?;
        }
        if stats.step % cfg.checkpoint_every == 0 {
            trainer.checkpoint(corpus).save(checkpoint_dir(out, stats.step))?;
        }
        trace.push(stats);
    }
    log.flush()?;
    let final_dir = final_checkpoint_dir(out);
    trainer.checkpoint(corpus).save(&final_dir)?;
    Ok(TrainOutcome {
        trace,
        final_checkpoint: final_dir,
        loss_log: log_path,
        model: trainer.into_model(),
    })
}

/// Inference-mode mean L1 over `utts`, weighting each utterance equally.
pub fn mean_l1(model: &VisoTts<f32>, utts: &[Utterance]) -> Result<f64> {
    let mut total = 0.0;
    for u in utts {
        let (mel, _) = model.infer(&u.phonemes, &u.visual, &u.speaker)?;
        total += l1_loss(&mel, &u.mel)?;
    }
    Ok(total / utts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mel(m: Array2<f32>) -> MelSpectrogram {
        MelSpectrogram::new(m).unwrap()
    }

    #[test]
    fn l1_examples() {
        let a = Array2::from_shape_fn((3, 80), |(i, j)| (i * 80 + j) as f32 / 240.0);
        assert_eq!(l1_loss(&mel(a.clone()), &mel(a.clone())).unwrap(), 0.0);
        let shifted = a.mapv(|v| v + 0.25);
        assert!((l1_loss(&mel(shifted), &mel(a.clone())).unwrap() - 0.25).abs() < 1e-6);
        assert!(l1_arrays(&array![[0.0, 1.0], [2.0, 3.0]], &array![[1.0, 1.0], [1.0, 1.0]]).unwrap() == 1.0);
        assert!(l1_arrays(&array![[0.0, 1.0]], &array![[1.0], [1.0]]).is_err());
    }

    #[test]
    fn schedule_shape() {
        let (d, w) = (64, 500);
        let peak = lr_schedule(w, d, w, 1.0).unwrap();
        let w_f = w as f64;
        assert!((peak - (d as f64).powf(-0.5) * w_f.powf(-0.5)).abs() < 1e-15);
        assert!((w_f.powf(-0.5) - w_f * w_f.powf(-1.5)).abs() < 1e-15);
        assert!((lr_schedule(4 * w, d, w, 1.0).unwrap() - peak / 2.0).abs() < 1e-12);
        let mut prev = 0.0;
        for s in 1..=w {
            let lr = lr_schedule(s, d, w, 1.0).unwrap();
            assert!(lr > prev);
            prev = lr;
        }
        for s in w + 1..w + 2000 {
            let lr = lr_schedule(s, d, w, 1.0).unwrap();
            assert!(lr < prev && lr > 0.0);
            prev = lr;
        }
        assert!(lr_schedule(0, d, w, 1.0).is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![array![[3.0f32, 0.0]], array![[0.0f32], [4.0]]];
        let before = clip_gradients(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-9);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        let mut small = vec![array![[0.3f32]]];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0][[0, 0]], 0.3);
    }

    /// Two Adam steps on one scalar against a hand-rolled update.
    #[test]
    fn adam_matches_reference_update() {
        let cfg = TrainConfig::default();
        let mut p = ParamStore::<f32>::new();
        p.push("x".into(), array![[1.0]]);
        let mut adam = Adam::new(&p, &cfg);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in [(1u64, 0.5f64), (2, -0.2)] {
            adam.update(&mut p, &[array![[g as f32]]], 0.01, t);
            m = 0.9 * m + 0.1 * g;
            v = 0.98 * v + 0.02 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.98f64.powi(t as i32));
            x -= 0.01 * mh / (vh.sqrt() + 1e-9);
            assert!((p.tensor(0)[[0, 0]] as f64 - x).abs() < 1e-6);
        }
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen = vec![0; 10];
        for step in 1..=3 {
            for i in batch_indices(10, 4, 3, step) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(batch_indices(10, 4, 3, 3).len(), 2);
        assert_eq!(batch_indices(10, 4, 3, 5), batch_indices(10, 4, 3, 5));
        assert_ne!(batch_indices(10, 4, 3, 1), batch_indices(10, 4, 3, 4));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { warmup_steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
