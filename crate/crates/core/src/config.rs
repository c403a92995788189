//! Run configuration: one JSON document with dotted `key=value` overrides.
//!
//! ```json
//! {"model": {...}, "train": {...}, "eval": {...}, "text": {...}}
//! ```
//!
//! `train.loss.tau_align=0.1` sets a nested field. Values parse as JSON and
//! fall back to a plain string, so `train.tunability=HEAD` works unquoted.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backbone::EncoderSpec;
use crate::retrieval::ApDenominator;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad override '{0}': expected key=value")]
    BadOverride(String),
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub init_seed: u64,
    /// Optional parameter archive with pretrained weights.
    #[serde(default)]
    pub pretrained: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub ap_denominator: ApDenominator,
    pub sbsr_queries_per_class: usize,
    pub sbsr_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    /// `stub` or `import`.
    pub provider: String,
    /// Text encoder name; the stub derives its width from it.
    pub encoder: String,
    /// Path of an import file when `provider` is `import`.
    #[serde(default)]
    pub import_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub text: TextConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig { encoder: EncoderSpec::identity((1, 1, 16), 16, 8), init_seed: 0, pretrained: None },
            train: TrainConfig::default(),
            eval: EvalConfig { ks: Vec::new(), ap_denominator: ApDenominator::MinRelevantK, sbsr_queries_per_class: 10, sbsr_seed: 0 },
            text: TextConfig { provider: "stub".into(), encoder: "RN50".into(), import_path: None },
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        if !obj.contains_key(*part) {
            return Err(ConfigError::UnknownKey(key.into()));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    Err(ConfigError::UnknownKey(key.into()))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    /// Applies `key=value` overrides in order.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut v = serde_json::to_value(self).expect("serializable");
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key.trim(), value)?;
        }
        serde_json::from_value(v).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::TunabilityMode;

    #[test]
    fn overrides_set_nested_fields() {
        let c = RunConfig::default()
            .with_overrides(&["train.loss.tau_align=0.1".into(), "train.tunability=HEAD".into(), "train.adapter_count=1".into()])
            .unwrap();
        assert_eq!(c.train.loss.tau_align, 0.1);
        assert_eq!(c.train.tunability, TunabilityMode::Head);
        assert_eq!(c.train.adapter_count, Some(1));
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(matches!(RunConfig::default().with_overrides(&["train.nope=1".into()]), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::default().with_overrides(&["train.epochs".into()]), Err(ConfigError::BadOverride(_))));
        assert!(matches!(RunConfig::default().with_overrides(&["train.epochs=abc".into()]), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
