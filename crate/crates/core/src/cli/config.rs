//! Layered run configuration: defaults, then a TOML or JSON file, then
//! `--set dotted.path=value` flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::model::ModelConfig;
use crate::policy::RolloutConfig;
use crate::simenv::EnvConfig;
use crate::training::TrainConfig;
use crate::{Error, Result};

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
    pub seed: u64,
    pub action_free: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 50,
            seed: 0,
            action_free: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            rollout: RolloutConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.rollout.validate(self.model.chunk)?;
        if self.data.episodes == 0 {
            return Err(Error::Config("data.episodes: must be positive".into()));
        }
        if self.env.resolution != self.model.resolution {
            return Err(Error::Config(format!(
                "env.resolution: {} differs from model.resolution {}",
                self.env.resolution, self.model.resolution
            )));
        }
        Ok(())
    }

    /// Resolves defaults ≺ `file` ≺ `sets` and validates the result.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(path) = file {
            merge(&mut tree, read_file(path)?, "")?;
        }
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {s}: expected dotted.path=value")))?;
            merge(&mut tree, nest(key.trim(), parse_scalar(raw.trim())), "")?;
        }
        let cfg: Self = serde_path_to_error::deserialize(tree).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: String| Error::Config(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    } else {
        let table: toml::Table = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        serde_json::to_value(table).map_err(|e| bad(e.to_string()))
    }
}

/// A `--set` right-hand side: any TOML value, `null`, or a bare string.
fn parse_scalar(raw: &str) -> Value {
    if raw == "null" {
        return Value::Null;
    }
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key v")).expect("toml value"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn nest(dotted: &str, value: Value) -> Value {
    dotted.rsplit('.').fold(value, |acc, k| {
        let mut m = Map::new();
        m.insert(k.to_string(), acc);
        Value::Object(m)
    })
}

/// Overlays `over` onto `base`; keys absent from the defaults are rejected
/// with their dotted path.
fn merge(base: &mut Value, over: Value, prefix: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("{path}: unknown key")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}
