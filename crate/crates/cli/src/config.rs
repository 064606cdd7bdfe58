//! Layered run configuration: defaults, then a `key=value` file, then
//! `--set` pairs, then dedicated flags. The resolved result is written next
//! to the outputs so any artifact can be reproduced from its directory alone.

use std::fs;
use std::path::Path;

use cyclecap_core::{ModelConfig, TrainConfig};
use serde_json::Value;

/// Model shape plus optimization schedule. Keys without a prefix address
/// [`TrainConfig`] fields; `model.*` keys address [`ModelConfig`] fields.
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(smoke: bool) -> Self {
        Self {
            model: if smoke { ModelConfig::smoke() } else { ModelConfig::default() },
            train: TrainConfig::default(),
        }
    }

    /// Applies one config file. Blank lines and `#` comments are skipped.
    /// `allow_model` is off when the model shape is pinned by a checkpoint.
    pub fn apply_file(&mut self, path: &Path, allow_model: bool) -> Result<(), String> {
        let text =
            fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                format!("config {} line {}: expected key=value", path.display(), lineno + 1)
            })?;
            self.set(k.trim(), v.trim(), allow_model)?;
        }
        Ok(())
    }

    pub fn apply_sets(&mut self, sets: &[String], allow_model: bool) -> Result<(), String> {
        for s in sets {
            let (k, v) =
                s.split_once('=').ok_or_else(|| format!("--set {s}: expected key=value"))?;
            self.set(k.trim(), v.trim(), allow_model)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, raw: &str, allow_model: bool) -> Result<(), String> {
        if let Some(field) = key.strip_prefix("model.") {
            if !allow_model {
                return Err(format!("{key}: the model shape is fixed by the checkpoint"));
            }
            self.model = set_field(&self.model, field, raw)?;
        } else {
            let field = key.strip_prefix("train.").unwrap_or(key);
            self.train = set_field(&self.train, field, raw)?;
        }
        Ok(())
    }

    /// Sorted `key=value` lines covering every field.
    pub fn render(&self) -> String {
        let mut lines: Vec<String> =
            kv_lines("model.", &self.model).into_iter().chain(kv_lines("", &self.train)).collect();
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.render())
    }
}

fn set_field<S: serde::Serialize + serde::de::DeserializeOwned>(
    current: &S,
    field: &str,
    raw: &str,
) -> Result<S, String> {
    let Value::Object(mut map) = serde_json::to_value(current).expect("config serializes") else {
        unreachable!("configs are structs");
    };
    if !map.contains_key(field) {
        return Err(format!("unknown config key `{field}`"));
    }
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.into()));
    map.insert(field.to_string(), parsed);
    serde_json::from_value(Value::Object(map)).map_err(|e| format!("config key `{field}`: {e}"))
}

fn kv_lines<S: serde::Serialize>(prefix: &str, s: &S) -> Vec<String> {
    let Value::Object(map) = serde_json::to_value(s).expect("config serializes") else {
        unreachable!("configs are structs");
    };
    map.into_iter().map(|(k, v)| format!("{prefix}{k}={v}")).collect()
}
