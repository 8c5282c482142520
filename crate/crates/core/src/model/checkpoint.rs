use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamStore, VisoTts};
use crate::dsp::MelNormalization;
use crate::error::{Error, Result};
pub use crate::training::TrainProgress;

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

/// `git describe` of the tree the crate was built from.
pub const GIT_DESCRIBE: &str = env!("VISOTTS_GIT_DESCRIBE");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub git_describe: String,
    pub mel_normalization: MelNormalization,
    pub vocabulary: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainProgress>,
}

/// Adam first and second moments, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

/// A saved model plus, for training checkpoints, optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub moments: Option<Moments>,
}

impl Checkpoint {
    pub fn new(
        model: &VisoTts<f32>,
        mel_normalization: MelNormalization,
        vocabulary: Vec<String>,
        training: Option<TrainProgress>,
        moments: Option<Moments>,
    ) -> Self {
        Self {
            meta: CheckpointMeta {
                model: model.config().clone(),
                git_describe: GIT_DESCRIBE.to_string(),
                mel_normalization,
                vocabulary,
                training,
            },
            params: model.params().clone(),
            moments,
        }
    }

    pub fn model(&self) -> Result<VisoTts<f32>> {
        VisoTts::from_params(self.meta.model.clone(), self.params.clone())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(&self.meta)?;
        text.push('\n');
        fs::write(dir.join(CONFIG_FILE), text)?;
        fs::write(dir.join(PARAMS_FILE), self.params.to_bytes())?;
        match &self.moments {
            Some(m) => {
                let mut both = ParamStore::new();
                for (prefix, store) in [("m", &m.m), ("v", &m.v)] {
                    for (name, t) in store.names().iter().zip(store.tensors()) {
                        both.push(format!("{prefix}/{name}"), t.clone());
                    }
                }
                fs::write(dir.join(OPTIMIZER_FILE), both.to_bytes())?;
            }
            None => {
                if dir.join(OPTIMIZER_FILE).exists() {
                    fs::remove_file(dir.join(OPTIMIZER_FILE))?;
                }
            }
        }
        Ok(())
    }

    /// Load and verify that the parameter blob matches the stored config
    /// exactly.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config_path = dir.join(CONFIG_FILE);
        if !config_path.is_file() {
            return Err(Error::CheckpointNotFound(dir.to_path_buf()));
        }
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&config_path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", config_path.display())))?;
        let blob = fs::read(dir.join(PARAMS_FILE))
            .map_err(|e| Error::Checkpoint(format!("{PARAMS_FILE}: {e}")))?;
        let loaded = ParamStore::from_bytes(&blob)?;
        let params = VisoTts::from_params(meta.model.clone(), loaded)?.params().clone();

        let moments = match fs::read(dir.join(OPTIMIZER_FILE)) {
            Ok(bytes) => {
                let both = ParamStore::from_bytes(&bytes)?;
                let split = |prefix: &str| -> Result<ParamStore<f32>> {
                    let mut s = ParamStore::new();
                    for name in params.names() {
                        let t = both.get(&format!("{prefix}/{name}")).ok_or_else(|| {
                            Error::Checkpoint(format!("optimizer state lacks {prefix}/{name}"))
                        })?;
                        s.push(name.clone(), t.clone());
                    }
                    Ok(s)
                };
                let m = Moments { m: split("m")?, v: split("v")? };
                if both.len() != 2 * params.len() || !m.m.same_layout(&params) || !m.v.same_layout(&params) {
                    return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
                }
                Some(m)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        Ok(Self { meta, params, moments })
    }
}
