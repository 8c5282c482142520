use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty audio")]
    EmptyAudio,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error("unsupported sample rate {0} Hz (pipeline runs at 16000 Hz)")]
    SampleRate(u32),
    #[error("invalid framing: {0}")]
    Framing(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("infeasible band spacing: {0}")]
    Filterbank(String),

    #[error("empty text")]
    EmptyText,
    #[error("unknown phoneme: {0}")]
    UnknownPhoneme(String),
    #[error("unknown phoneme id: {0}")]
    UnknownPhonemeId(u32),
    #[error("invalid phoneme sequence: {0}")]
    Sequence(String),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("invalid durations: {0}")]
    Durations(String),
    #[error("unknown speaker: {0}")]
    UnknownSpeaker(String),
    #[error("clip too short for speaker embedding: {0} samples, need at least 16000")]
    SpeakerClipTooShort(usize),
    #[error("missing {kind}: {utterance}")]
    Missing { kind: &'static str, utterance: String },
    #[error("corrupt {kind}: {utterance}")]
    Corrupt { kind: &'static str, utterance: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid model config: {0}")]
    ModelConfig(String),
    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("checkpoint not found: {}", .0.display())]
    CheckpointNotFound(PathBuf),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    NonFiniteLoss { step: u64, lr: f64, grad_norm: f64 },
    #[error("corpus does not match model: {0}")]
    CorpusMismatch(String),

    #[error("clip shorter than analysis window")]
    StoiTooShort,
    #[error("alignment row {row} is not stochastic (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("png: {0}")]
    Png(String),
}
