use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::store::{self, CorpusManifest, GeneratorInfo, SpeakerEntry, UtteranceEntry, VocabularyRef};
use super::{SpeakerEmbedding, TableSpeakerEmbedder, Utterance, VisualFeatureSequence, UPSAMPLE_N, VISUAL_DIM};
use crate::dsp::{MelNormalization, MelSpectrogram, N_MELS};
use crate::error::{Error, Result};
use crate::seed;
use crate::text::{PhonemeSequence, PhonemeVocabulary};


/// Corpus generation knobs. Durations are in video frames (40 ms each).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub utterances: usize,
    pub speakers: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub sigma_visual: f32,
    pub sigma_mel: f32,
    pub master_seed: u64,
    pub max_frames: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            utterances: 32,
            speakers: 4,
            min_phonemes: 3,
            max_phonemes: 8,
            min_duration: 1,
            max_duration: 4,
            sigma_visual: 0.05,
            sigma_mel: 0.05,
            master_seed: 7,
            max_frames: 64,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.utterances == 0 || self.speakers == 0 {
            return bad("need at least one utterance and one speaker".into());
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return bad(format!(
                "phoneme range [{}, {}] is empty",
                self.min_phonemes, self.max_phonemes
            ));
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad(format!(
                "duration range [{}, {}] must be within [1, inf)",
                self.min_duration, self.max_duration
            ));
        }
        if self.max_phonemes * self.max_duration > self.max_frames {
            return bad(format!(
                "{} phonemes x {} frames exceeds max_frames {}",
                self.max_phonemes, self.max_duration, self.max_frames
            ));
        }
        if !(self.sigma_visual >= 0.0 && self.sigma_mel >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            sigma_visual: self.sigma_visual,
            sigma_mel: self.sigma_mel,
            max_frames: self.max_frames,
        }
    }

    pub fn speaker_ids(&self) -> Vec<String> {
        (0..self.speakers).map(|i| format!("spk_{i:02}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationParams {
    pub sigma_visual: f32,
    pub sigma_mel: f32,
    pub max_frames: usize,
}

/// Fixed per-phoneme visual signatures and mel templates, plus per-speaker
/// mel offsets, all derived from one seed.
#[derive(Debug, Clone)]
pub struct SynthesisTables {
    seed: u64,
    signatures: Array2<f32>,
    templates: Array2<f32>,
}

/// Number of Fourier terms in a mel template.
const TEMPLATE_TERMS: usize = 4;
const SPEAKER_OFFSET_SCALE: f32 = 0.1;

impl SynthesisTables {
    pub fn new(seed: u64, vocab_size: usize) -> Self {
        let mut rng = seed::rng(seed, "visual-signature", 0);
        let signatures =
            Array2::from_shape_simple_fn((vocab_size, VISUAL_DIM), || rng.sample(StandardNormal));

        let mut templates = Array2::zeros((vocab_size, N_MELS));
        for p in 0..vocab_size {
            let mut rng = seed::rng(seed, "mel-template", p as u64);
            let coeffs: Vec<(f64, f64)> = (0..TEMPLATE_TERMS)
                .map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal)))
                .collect();
            let curve: Vec<f64> = (0..N_MELS)
                .map(|b| {
                    let x = 2.0 * PI * b as f64 / N_MELS as f64;
                    coeffs
                        .iter()
                        .enumerate()
                        .map(|(k, (a, c))| {
                            let f = (k + 1) as f64;
                            (a * (f * x).cos() + c * (f * x).sin()) / f
                        })
                        .sum()
                })
                .collect();
            let peak = curve.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
            for (b, v) in curve.iter().enumerate() {
                templates[[p, b]] = (0.5 + 0.35 * v / peak) as f32;
            }
        }
        Self {
            seed,
            signatures,
            templates,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab_size(&self) -> usize {
        self.templates.nrows()
    }

    pub fn signature(&self, phoneme: u32) -> ArrayView1<'_, f32> {
        self.signatures.row(phoneme as usize)
    }

    /// Template in normalized mel units, within `[0.15, 0.85]`.
    pub fn template(&self, phoneme: u32) -> ArrayView1<'_, f32> {
        self.templates.row(phoneme as usize)
    }

    /// `±0.1` per band, fixed per speaker id.
    pub fn speaker_offset(&self, speaker_id: &str) -> Array1<f32> {
        let mut rng = seed::rng(seed::derive_str(self.seed, "speaker-offset", speaker_id), "bands", 0);
        Array1::from_shape_simple_fn(N_MELS, || {
            if rng.random::<bool>() {
                SPEAKER_OFFSET_SCALE
            } else {
                -SPEAKER_OFFSET_SCALE
            }
        })
    }
}

/// Build one utterance. `durations[i]` is the number of video frames phoneme
/// `i` stays active.
pub fn generate_utterance(
    id: &str,
    rng_seed: u64,
    tables: &SynthesisTables,
    speaker: &SpeakerEmbedding,
    phonemes: PhonemeSequence,
    durations: &[usize],
    params: GenerationParams,
) -> Result<Utterance> {
    if durations.len() != phonemes.len() {
        return Err(Error::Durations(format!(
            "{} durations for {} phonemes",
            durations.len(),
            phonemes.len()
        )));
    }
    if durations.iter().any(|&d| d == 0) {
        return Err(Error::Durations("every phoneme needs at least one frame".into()));
    }
    let t: usize = durations.iter().sum();
    if t > params.max_frames {
        return Err(Error::Durations(format!(
            "{t} frames exceeds max_frames {}",
            params.max_frames
        )));
    }
    if let Some(&bad) = phonemes.ids().iter().find(|&&p| p as usize >= tables.vocab_size()) {
        return Err(Error::UnknownPhonemeId(bad));
    }

    let alignment: Vec<u32> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i as u32, d))
        .collect();
    let offset = tables.speaker_offset(&speaker.speaker_id);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);

    let mut visual = Array2::zeros((t, VISUAL_DIM));
    for (frame, &k) in alignment.iter().enumerate() {
        let sig = tables.signature(phonemes.ids()[k as usize]);
        for (j, &s) in sig.iter().enumerate() {
            let noise: f32 = rng.sample(StandardNormal);
            visual[[frame, j]] = s + params.sigma_visual * noise;
        }
    }

    let mut mel = Array2::zeros((UPSAMPLE_N * t, N_MELS));
    for (frame, &k) in alignment.iter().enumerate() {
        let template = tables.template(phonemes.ids()[k as usize]);
        for sub in 0..UPSAMPLE_N {
            let row = UPSAMPLE_N * frame + sub;
            for b in 0..N_MELS {
                let noise: f32 = rng.sample(StandardNormal);
                let v = template[b] + offset[b] + params.sigma_mel * noise;
                mel[[row, b]] = if params.sigma_mel > 0.0 { v.clamp(0.0, 1.0) } else { v };
            }
        }
    }

    let utt = Utterance {
        id: id.to_string(),
        phonemes,
        visual: VisualFeatureSequence::new(visual)?,
        mel: MelSpectrogram::new(mel)?,
        speaker: speaker.clone(),
        oracle_alignment: alignment,
    };
    utt.validate()?;
    Ok(utt)
}

/// Generate and write a corpus under `root`. The result is a pure function
/// of `config` and the vocabulary.
pub fn generate_corpus(
    config: &CorpusConfig,
    vocab: &PhonemeVocabulary,
    root: impl AsRef<Path>,
) -> Result<CorpusManifest> {
    config.validate()?;
    let root = root.as_ref();
    fs::create_dir_all(root.join("speakers"))?;

    let table_seed = seed::derive(config.master_seed, "tables", 0);
    let tables = SynthesisTables::new(table_seed, vocab.len());
    let speaker_ids = config.speaker_ids();
    let embedder = TableSpeakerEmbedder::new(
        seed::derive(config.master_seed, "speaker-embedding", 0),
        speaker_ids.clone(),
    );
    let speakers: Vec<SpeakerEmbedding> = speaker_ids
        .iter()
        .map(|id| embedder.embed(id))
        .collect::<Result<_>>()?;

    let mut speaker_entries = Vec::new();
    for spk in &speakers {
        let rel = format!("speakers/{}.emb", spk.speaker_id);
        fs::write(root.join(&rel), crate::dsp::io::encode_f32s(spk.vector()))?;
        speaker_entries.push(SpeakerEntry {
            id: spk.speaker_id.clone(),
            embedding: rel,
        });
    }

    let content = vocab.content_ids();
    let params = config.params();
    let mut entries = Vec::with_capacity(config.utterances);
    for k in 0..config.utterances {
        let mut rng = seed::rng(config.master_seed, "utterance-layout", k as u64);
        let n = rng.random_range(config.min_phonemes..=config.max_phonemes);
        let ids: Vec<u32> = (0..n)
            .map(|_| content[rng.random_range(0..content.len())])
            .collect();
        let durations: Vec<usize> = (0..n)
            .map(|_| rng.random_range(config.min_duration..=config.max_duration))
            .collect();
        let symbols = ids.iter().map(|&i| vocab.symbol(i)).collect::<Result<Vec<_>>>()?;
        let phonemes = vocab.encode(&symbols)?;
        let speaker = &speakers[k % speakers.len()];
        let id = format!("utt_{k:04}");
        let utt = generate_utterance(
            &id,
            seed::derive(config.master_seed, "utterance-noise", k as u64),
            &tables,
            speaker,
            phonemes,
            &durations,
            params,
        )?;
        store::write_utterance(root, &utt, vocab)?;
        entries.push(UtteranceEntry {
            id,
            speaker: speaker.speaker_id.clone(),
            n_phonemes: n,
            n_frames: utt.n_frames(),
            n_mel_frames: utt.mel.n_frames(),
        });
    }

    let manifest = CorpusManifest::new(
        VocabularyRef {
            file: "vocab.txt".into(),
            symbols: vocab.symbols().to_vec(),
        },
        MelNormalization::default(),
        speaker_entries,
        entries,
        Some(GeneratorInfo {
            config: config.clone(),
            table_seed,
        }),
    );
    vocab.write(root.join("vocab.txt"))?;
    manifest.write(root)?;
    Ok(manifest)
}
