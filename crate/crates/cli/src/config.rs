//! Flat run configuration. Every key of the model, training and corpus
//! configs lives at the top level, next to the path keys. Values come from
//! flags, then the `--config` file, then defaults.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use thiserror::Error;

use visotts::model::ModelConfig;
use visotts::synthcorpus::CorpusConfig;
use visotts::training::TrainConfig;

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const SEED_ENV: &str = "VISOTTS_SEED";

const PATH_KEYS: [&str; 3] = ["corpus", "out", "checkpoint"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path} is not a JSON object: {reason}")]
    Syntax { path: PathBuf, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: expected {expected}, got {got}")]
    Type { key: String, expected: &'static str, got: String },
    #[error("{SEED_ENV}={0} is not an unsigned integer")]
    SeedEnv(String),
    #[error(transparent)]
    Invalid(#[from] visotts::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub corpus_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub griffin_lim_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusConfig::default(),
            corpus_dir: None,
            out: None,
            checkpoint: None,
            griffin_lim_iters: visotts::dsp::DEFAULT_ITERATIONS,
        }
    }
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("configs serialize as objects"),
    }
}

fn path_value(p: &Option<PathBuf>) -> Value {
    p.as_ref().map_or(Value::Null, |p| Value::String(p.display().to_string()))
}

impl RunConfig {
    /// Flat key/value view; corpus `master_seed` is folded into `seed`.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut m = object(serde_json::to_value(&self.model).expect("serializable"));
        m.extend(object(serde_json::to_value(&self.train).expect("serializable")));
        let mut c = object(serde_json::to_value(&self.corpus).expect("serializable"));
        c.remove("master_seed");
        m.extend(c);
        m.insert("corpus".into(), path_value(&self.corpus_dir));
        m.insert("out".into(), path_value(&self.out));
        m.insert("checkpoint".into(), path_value(&self.checkpoint));
        m.insert("griffin_lim_iters".into(), Value::from(self.griffin_lim_iters));
        m
    }

    fn from_flat(m: Map<String, Value>) -> Result<Self, ConfigError> {
        let pick = |keys: Map<String, Value>| -> Map<String, Value> {
            keys.keys().filter_map(|k| m.get(k).map(|v| (k.clone(), v.clone()))).collect()
        };
        let d = Self::default();
        let model_keys = object(serde_json::to_value(&d.model).expect("serializable"));
        let train_keys = object(serde_json::to_value(&d.train).expect("serializable"));
        let corpus_keys = object(serde_json::to_value(&d.corpus).expect("serializable"));
        let model: ModelConfig = serde_json::from_value(Value::Object(pick(model_keys))).map_err(bad)?;
        let train: TrainConfig = serde_json::from_value(Value::Object(pick(train_keys))).map_err(bad)?;
        let mut corpus_map = pick(corpus_keys);
        corpus_map.insert("master_seed".into(), m["seed"].clone());
        let corpus: CorpusConfig = serde_json::from_value(Value::Object(corpus_map)).map_err(bad)?;
        let path = |k: &str| m[k].as_str().map(PathBuf::from);
        Ok(Self {
            model,
            train,
            corpus,
            corpus_dir: path("corpus"),
            out: path("out"),
            checkpoint: path("checkpoint"),
            griffin_lim_iters: m["griffin_lim_iters"].as_u64().unwrap_or(0) as usize,
        })
    }

    /// Every flat key, in serialization order.
    pub fn keys() -> Vec<String> {
        Self::default().to_flat().keys().cloned().collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        if self.griffin_lim_iters == 0 {
            return Err(visotts::Error::Framing("griffin_lim_iters must be at least 1".into()).into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("serializable");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RUN_CONFIG_FILE), self.to_json())
    }
}

// the key-level checks run first, so whatever serde still rejects is a range
// or structural problem inside a sub-config
fn bad(e: serde_json::Error) -> ConfigError {
    ConfigError::Invalid(visotts::Error::ModelConfig(e.to_string()))
}

fn kind(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(_) => "a boolean".into(),
        Value::Number(n) => format!("the number {n}"),
        Value::String(s) => format!("the string {s:?}"),
        Value::Array(_) => "an array".into(),
        Value::Object(_) => "an object".into(),
    }
}

/// Check `value` against the type of the default for `key`.
fn typed(key: &str, default: &Value, value: Value) -> Result<Value, ConfigError> {
    let err = |expected| ConfigError::Type {
        key: key.to_string(),
        expected,
        got: kind(&value),
    };
    if PATH_KEYS.contains(&key) {
        return match value {
            Value::String(_) | Value::Null => Ok(value),
            _ => Err(err("a path string")),
        };
    }
    match default {
        Value::Number(n) if n.is_u64() => value.as_u64().map(Value::from).ok_or_else(|| err("an unsigned integer")),
        Value::Number(_) => value.as_f64().map(Value::from).ok_or_else(|| err("a number")),
        _ => Ok(value),
    }
}

/// A flag value as typed JSON for `key`.
pub fn flag_value(key: &str, raw: &str) -> Result<Value, ConfigError> {
    let defaults = RunConfig::default().to_flat();
    let default = defaults.get(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    let parsed = if PATH_KEYS.contains(&key) {
        Value::String(raw.to_string())
    } else {
        match default {
            Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(Value::from).unwrap_or(Value::String(raw.into())),
            Value::Number(_) => raw.parse::<f64>().map(Value::from).unwrap_or(Value::String(raw.into())),
            _ => Value::String(raw.to_string()),
        }
    };
    typed(key, default, parsed)
}

pub fn read_config_file(path: &Path) -> Result<Map<String, Value>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    if text.trim().is_empty() {
        return Ok(Map::new());
    }
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(other) => Err(ConfigError::Syntax {
            path: path.to_path_buf(),
            reason: format!("top level is {}", kind(&other)),
        }),
        Err(e) => Err(ConfigError::Syntax {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }),
    }
}

/// Resolve a run configuration from an optional file, flag overrides (flat
/// keys, already typed) and the seed environment fallback.
pub fn parse_config(
    file: Option<&Path>,
    flags: &Map<String, Value>,
    seed_env: Option<&str>,
) -> Result<RunConfig, ConfigError> {
    let mut merged = RunConfig::default().to_flat();
    let file_map = match file {
        Some(p) => read_config_file(p)?,
        None => Map::new(),
    };
    let mut explicit = Vec::new();
    for layer in [file_map, flags.clone()] {
        for (k, v) in layer {
            let default = merged.get(&k).ok_or_else(|| ConfigError::UnknownKey(k.clone()))?;
            let v = typed(&k, default, v)?;
            merged.insert(k.clone(), v);
            explicit.push(k);
        }
    }
    let set = |k: &str| explicit.iter().any(|e| e == k);
    if !set("seed") {
        if let Some(raw) = seed_env {
            let s = raw.trim().parse::<u64>().map_err(|_| ConfigError::SeedEnv(raw.to_string()))?;
            merged.insert("seed".into(), Value::from(s));
        }
    }
    if set("d") && !set("conv_hidden") {
        let d = merged["d"].as_u64().unwrap_or(0);
        merged.insert("conv_hidden".into(), Value::from(4 * d));
    }
    let cfg = RunConfig::from_flat(merged)?;
    cfg.validate()?;
    Ok(cfg)
}
