use std::path::{Path, PathBuf};

use lamole::data::{GeneratorConfig, Task};
use lamole::editor::EAConfig;
use lamole::encoder::{EncoderConfig, SelfcheckConfig, TrainConfig};
use lamole::explain::ExplanationConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: malformed JSON: {reason}")]
    MalformedJson { path: PathBuf, reason: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {reason}")]
    InvalidValue { key: String, reason: String },
}

impl ConfigError {
    fn invalid(key: &str, reason: impl ToString) -> Self {
        ConfigError::InvalidValue {
            key: key.to_string(),
            reason: reason.to_string(),
        }
    }
}

/// Where each artifact lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub registry: PathBuf,
    pub oracle: PathBuf,
    /// Written by `pretrain`; `train` starts from it when set.
    pub pretrained: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data/dataset.jsonl".into(),
            registry: "data/registry.json".into(),
            oracle: "data/oracle.json".into(),
            pretrained: None,
            checkpoint: "model/model.lmtn".into(),
            out_dir: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// The only seed. Every module receives it and draws from its own named streams.
    pub seed: u64,
    pub data: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub explain: ExplanationConfig,
    pub ea: EAConfig,
    pub selfcheck: SelfcheckConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: TrainConfig {
                epochs: 5,
                ..TrainConfig::default()
            },
            train: TrainConfig::default(),
            explain: ExplanationConfig::default(),
            ea: EAConfig::default(),
            selfcheck: SelfcheckConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Keys filled in from the global seed or from the dataset.
pub const DERIVED_KEYS: [&str; 8] = [
    "data.seed",
    "encoder.seed",
    "encoder.vocab_size",
    "encoder.n_classes",
    "pretrain.seed",
    "train.seed",
    "ea.seed",
    "selfcheck.seed",
];

impl RunConfig {
    /// Copies the global seed into every module and checks each module.
    fn finish(mut self) -> Result<Self, ConfigError> {
        let s = self.seed;
        self.data.seed = s;
        self.encoder.seed = s;
        self.pretrain.seed = s;
        self.train.seed = s;
        self.ea.seed = s;
        self.selfcheck.seed = s;
        self.encoder.n_classes = self.n_classes();
        self.data.validate().map_err(|e| ConfigError::invalid("data", e))?;
        self.encoder.validate().map_err(|e| ConfigError::invalid("encoder", e))?;
        self.pretrain.validate().map_err(|e| ConfigError::invalid("pretrain", e))?;
        self.train.validate().map_err(|e| ConfigError::invalid("train", e))?;
        self.explain.validate().map_err(|e| ConfigError::invalid("explain", e))?;
        self.ea.validate().map_err(|e| ConfigError::invalid("ea", e))?;
        lamole::encoder::selfcheck_instance(&self.selfcheck).map_err(|e| ConfigError::invalid("selfcheck", e))?;
        Ok(self)
    }

    pub fn n_classes(&self) -> usize {
        match self.data.task {
            Task::Classification => 2,
            Task::Regression => 1,
        }
    }

    /// Encoder shape for a vocabulary of `vocab_size` entries.
    pub fn encoder_for(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            ..self.encoder.clone()
        }
    }
}

/// Parses `--key value` text: JSON when it parses, a plain string otherwise.
pub fn parse_override_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

fn set_dotted(root: &mut Map<String, Value>, key: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::UnknownKey(key.to_string()));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        node = entry.as_object_mut().ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Leaves of `user` as dotted keys; fails on the first key the schema lacks.
fn collect_leaves(user: &Map<String, Value>, schema: &Map<String, Value>, prefix: &str, out: &mut Vec<(String, Value)>) -> Result<(), ConfigError> {
    for (k, v) in user {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(expected) = schema.get(k) else {
            return Err(ConfigError::UnknownKey(key));
        };
        match (v, expected) {
            (Value::Object(u), Value::Object(s)) => collect_leaves(u, s, &key, out)?,
            (_, Value::Object(_)) => return Err(ConfigError::invalid(&key, "expected an object")),
            (Value::Object(u), _) if !u.is_empty() => collect_leaves(u, &Map::new(), &key, out)?,
            _ => out.push((key, v.clone())),
        }
    }
    Ok(())
}

/// Reads the JSON config at `path` (defaults when `None`), applies dotted
/// overrides in order and validates the result.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut user = match path {
        Some(p) => {
            let malformed = |reason: String| ConfigError::MalformedJson {
                path: p.to_path_buf(),
                reason,
            };
            let text = std::fs::read_to_string(p).map_err(|e| malformed(e.to_string()))?;
            match serde_json::from_str::<Value>(&text).map_err(|e| malformed(e.to_string()))? {
                Value::Object(m) => m,
                _ => return Err(malformed("top level must be an object".into())),
            }
        }
        None => Map::new(),
    };
    for (k, v) in overrides {
        set_dotted(&mut user, k, parse_override_value(v))?;
    }

    let defaults = serde_json::to_value(RunConfig::default()).expect("config serialises");
    let Value::Object(schema) = &defaults else {
        unreachable!("config is an object")
    };
    let mut leaves = Vec::new();
    collect_leaves(&user, schema, "", &mut leaves)?;

    let mut merged = schema.clone();
    for (key, value) in leaves {
        if DERIVED_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::invalid(&key, "derived from the global seed or the dataset"));
        }
        set_dotted(&mut merged, &key, value)?;
        serde_json::from_value::<RunConfig>(Value::Object(merged.clone())).map_err(|e| ConfigError::invalid(&key, e))?;
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| ConfigError::invalid("config", e))?;
    cfg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn over(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn defaults_load() {
        let cfg = load_config(None, &[]).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.encoder.n_classes, 2);
    }

    #[test]
    fn seed_fans_out() {
        let cfg = load_config(None, &[over("seed", "7")]).unwrap();
        assert_eq!(
            [cfg.data.seed, cfg.encoder.seed, cfg.train.seed, cfg.pretrain.seed, cfg.ea.seed, cfg.selfcheck.seed],
            [7; 6]
        );
    }

    #[test]
    fn string_overrides_parse_as_enums() {
        let cfg = load_config(None, &[over("ea.mode", "unguided"), over("explain.method", "attention_only")]).unwrap();
        assert_eq!(cfg.ea.mode, lamole::editor::EditMode::Unguided);
        assert_eq!(cfg.explain.method, lamole::explain::Method::AttentionOnly);
    }

    #[test]
    fn regression_task_sets_one_output() {
        let cfg = load_config(None, &[over("data.task", "regression")]).unwrap();
        assert_eq!(cfg.encoder.n_classes, 1);
    }

    #[test]
    fn derived_keys_are_rejected() {
        for key in DERIVED_KEYS {
            let err = load_config(None, &[over(key, "3")]).unwrap_err();
            assert!(matches!(&err, ConfigError::InvalidValue { key: k, .. } if k == key), "{err}");
        }
    }

    #[test]
    fn nested_path_through_a_leaf_is_unknown() {
        let err = load_config(None, &[over("train.margin.x", "1")]).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "train.margin.x"));
    }

    #[test]
    fn namespace_must_be_an_object() {
        let err = load_config(None, &[over("train", "3")]).unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { key, .. } if key == "train"));
    }

    #[test]
    fn semantic_checks_name_the_module() {
        let err = load_config(None, &[over("ea.crossover_prob", "1.5")]).unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { key, .. } if key == "ea"));
        let err = load_config(None, &[over("encoder.d_model", "30"), over("encoder.heads", "4")]).unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { key, .. } if key == "encoder"));
    }
}
