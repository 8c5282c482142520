use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    CorpusConfig, SpeakerEmbedding, Utterance, VisualFeatureSequence, FPS, SPEAKER_DIM,
    UPSAMPLE_N, VISUAL_DIM,
};
use crate::dsp::io::{decode_f32s, decode_matrix, encode_matrix, encode_u32s, decode_u32s};
use crate::dsp::{MelNormalization, MelSpectrogram, N_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::text::PhonemeVocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularyRef {
    pub file: String,
    pub symbols: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerEntry {
    pub id: String,
    /// Path of the `.emb` file relative to the corpus root.
    pub embedding: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceEntry {
    pub id: String,
    pub speaker: String,
    pub n_phonemes: usize,
    pub n_frames: usize,
    pub n_mel_frames: usize,
}

/// Provenance of a generated corpus; absent for imported data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInfo {
    pub config: CorpusConfig,
    pub table_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub fps: u32,
    pub upsample_n: usize,
    pub visual_dim: usize,
    pub speaker_dim: usize,
    pub vocabulary: VocabularyRef,
    pub mel_normalization: MelNormalization,
    pub speakers: Vec<SpeakerEntry>,
    pub utterances: Vec<UtteranceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
}

impl CorpusManifest {
    pub fn new(
        vocabulary: VocabularyRef,
        mel_normalization: MelNormalization,
        speakers: Vec<SpeakerEntry>,
        utterances: Vec<UtteranceEntry>,
        generator: Option<GeneratorInfo>,
    ) -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_mels: N_MELS,
            fps: FPS,
            upsample_n: UPSAMPLE_N,
            visual_dim: VISUAL_DIM,
            speaker_dim: SPEAKER_DIM,
            vocabulary,
            mel_normalization,
            speakers,
            utterances,
            generator,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Manifest(msg)) };
        check(self.upsample_n == UPSAMPLE_N, format!("upsample_n is {}, must be {UPSAMPLE_N}", self.upsample_n))?;
        check(self.fps == FPS, format!("fps is {}, must be {FPS}", self.fps))?;
        check(
            self.sample_rate == SAMPLE_RATE,
            format!("sample_rate is {}, must be {SAMPLE_RATE}", self.sample_rate),
        )?;
        check(self.n_mels == N_MELS, format!("n_mels is {}, must be {N_MELS}", self.n_mels))?;
        check(
            self.visual_dim == VISUAL_DIM,
            format!("visual_dim is {}, must be {VISUAL_DIM}", self.visual_dim),
        )?;
        check(
            self.speaker_dim == SPEAKER_DIM,
            format!("speaker_dim is {}, must be {SPEAKER_DIM}", self.speaker_dim),
        )?;
        self.mel_normalization.validate()?;
        PhonemeVocabulary::from_symbols(self.vocabulary.symbols.clone())?;

        let mut speakers = HashSet::new();
        for s in &self.speakers {
            check(speakers.insert(s.id.as_str()), format!("duplicate speaker {}", s.id))?;
        }
        let mut ids = HashSet::new();
        for u in &self.utterances {
            check(ids.insert(u.id.as_str()), format!("duplicate utterance {}", u.id))?;
            check(
                speakers.contains(u.speaker.as_str()),
                format!("{}: unknown speaker {}", u.id, u.speaker),
            )?;
            check(
                u.n_frames >= 1 && u.n_phonemes >= 1 && u.n_phonemes <= u.n_frames,
                format!("{}: {} phonemes over {} frames", u.id, u.n_phonemes, u.n_frames),
            )?;
            check(
                u.n_mel_frames == self.upsample_n * u.n_frames,
                format!("{}: {} mel frames for {} video frames", u.id, u.n_mel_frames, u.n_frames),
            )?;
            check(
                !u.id.is_empty() && !u.id.contains(['/', '\\']) && u.id != "." && u.id != "..",
                format!("invalid utterance id {:?}", u.id),
            )?;
        }
        Ok(())
    }

    pub fn write(&self, root: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(root.as_ref().join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Manifest(format!("{} not found", path.display())),
            _ => Error::Io(e),
        })?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// Write one utterance directory `root/<id>/`.
pub fn write_utterance(root: &Path, utt: &Utterance, vocab: &PhonemeVocabulary) -> Result<()> {
    let dir = root.join(&utt.id);
    fs::create_dir_all(&dir)?;
    let mut phon = vocab.decode(&utt.phonemes)?.join(" ");
    phon.push('\n');
    fs::write(dir.join("phonemes.txt"), phon)?;
    fs::write(dir.join("visual.f32"), encode_matrix(utt.visual.features()))?;
    fs::write(dir.join("mel.f32"), encode_matrix(utt.mel.frames()))?;
    fs::write(dir.join("align.u32"), encode_u32s(&utt.oracle_alignment))?;
    fs::write(dir.join("speaker.txt"), format!("{}\n", utt.speaker.speaker_id))?;
    Ok(())
}

/// An opened corpus. Utterances load on demand.
#[derive(Debug, Clone)]
pub struct Corpus {
    root: PathBuf,
    manifest: CorpusManifest,
    vocab: PhonemeVocabulary,
    speakers: HashMap<String, SpeakerEmbedding>,
}

pub fn read_corpus(root: impl AsRef<Path>) -> Result<Corpus> {
    Corpus::open(root)
}

impl Corpus {
    /// Read and validate the manifest, vocabulary and speaker roster.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = CorpusManifest::read(&root)?;
        let vocab_path = root.join(&manifest.vocabulary.file);
        if !vocab_path.exists() {
            return Err(Error::Manifest(format!(
                "vocabulary file {} not found",
                vocab_path.display()
            )));
        }
        let vocab = PhonemeVocabulary::read(&vocab_path)?;
        if vocab.symbols() != manifest.vocabulary.symbols.as_slice() {
            return Err(Error::Manifest(format!(
                "{} disagrees with the manifest vocabulary",
                manifest.vocabulary.file
            )));
        }
        let mut speakers = HashMap::new();
        for s in &manifest.speakers {
            let path = root.join(&s.embedding);
            let bytes = fs::read(&path).map_err(|_| Error::Missing {
                kind: "speaker embedding",
                utterance: s.id.clone(),
            })?;
            let corrupt = || Error::Corrupt {
                kind: "speaker embedding",
                utterance: s.id.clone(),
            };
            let v = decode_f32s(&bytes).ok_or_else(corrupt)?;
            let emb = SpeakerEmbedding::new(s.id.clone(), v).map_err(|_| corrupt())?;
            speakers.insert(s.id.clone(), emb);
        }
        Ok(Self {
            root,
            manifest,
            vocab,
            speakers,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn vocabulary(&self) -> &PhonemeVocabulary {
        &self.vocab
    }

    pub fn mel_normalization(&self) -> MelNormalization {
        self.manifest.mel_normalization
    }

    pub fn len(&self) -> usize {
        self.manifest.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.utterances.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.utterances.iter().map(|u| u.id.as_str())
    }

    pub fn speaker(&self, id: &str) -> Result<&SpeakerEmbedding> {
        self.speakers
            .get(id)
            .ok_or_else(|| Error::UnknownSpeaker(id.to_string()))
    }

    pub fn speaker_ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.speakers.iter().map(|s| s.id.as_str())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.manifest.utterances.iter().position(|u| u.id == id)
    }

    pub fn load(&self, index: usize) -> Result<Utterance> {
        let entry = self
            .manifest
            .utterances
            .get(index)
            .ok_or_else(|| Error::Manifest(format!("utterance index {index} out of range")))?;
        self.load_entry(entry)
    }

    pub fn load_id(&self, id: &str) -> Result<Utterance> {
        let i = self
            .position(id)
            .ok_or_else(|| Error::Manifest(format!("no utterance {id}")))?;
        self.load(i)
    }

    pub fn load_all(&self) -> Result<Vec<Utterance>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }

    fn load_entry(&self, entry: &UtteranceEntry) -> Result<Utterance> {
        let dir = self.root.join(&entry.id);
        let id = &entry.id;
        let read = |name: &str, kind: &'static str| {
            fs::read(dir.join(name)).map_err(|_| Error::Missing {
                kind,
                utterance: id.clone(),
            })
        };
        let corrupt = |kind: &'static str| Error::Corrupt {
            kind,
            utterance: id.clone(),
        };

        let text = String::from_utf8(read("phonemes.txt", "phonemes")?).map_err(|_| corrupt("phonemes"))?;
        let symbols: Vec<&str> = text.split_whitespace().collect();
        let phonemes = self.vocab.encode(&symbols).map_err(|_| corrupt("phonemes"))?;

        let visual = decode_matrix(&read("visual.f32", "visual")?, Some(VISUAL_DIM))
            .and_then(|m| VisualFeatureSequence::new(m).ok())
            .ok_or_else(|| corrupt("visual"))?;
        let mel = decode_matrix(&read("mel.f32", "mel")?, Some(N_MELS))
            .and_then(|m| MelSpectrogram::new(m).ok())
            .ok_or_else(|| corrupt("mel"))?;
        let align = decode_u32s(&read("align.u32", "alignment")?).ok_or_else(|| corrupt("alignment"))?;

        let spk_text =
            String::from_utf8(read("speaker.txt", "speaker")?).map_err(|_| corrupt("speaker"))?;
        let spk_id = spk_text.trim();
        if spk_id != entry.speaker {
            return Err(corrupt("speaker"));
        }
        let speaker = self.speaker(spk_id)?.clone();

        if visual.n_frames() != entry.n_frames {
            return Err(corrupt("visual"));
        }
        if mel.n_frames() != entry.n_mel_frames {
            return Err(corrupt("mel"));
        }
        if phonemes.len() != entry.n_phonemes {
            return Err(corrupt("phonemes"));
        }
        let utt = Utterance {
            id: id.clone(),
            phonemes,
            visual,
            mel,
            speaker,
            oracle_alignment: align,
        };
        if super::validate_alignment(&utt.oracle_alignment, utt.n_frames(), utt.phonemes.len()).is_err() {
            return Err(corrupt("alignment"));
        }
        Ok(utt)
    }
}
