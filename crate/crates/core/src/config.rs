//! Run configuration as one flat JSON object with dotted keys
//! (`"model.d_model": 64`, `"train.theta": 0.1`, `"decode.lambda": 1.8`,
//! `"data.beta": 0.8`). Overrides are applied to the flat map before it is
//! validated, so they always win over file values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub grid: usize,
    pub colors: usize,
    pub beta: f64,
    /// Replace every patch feature with zero (text-only baseline).
    pub blind: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            n_train: 8000,
            n_eval: 1000,
            grid: 4,
            colors: 6,
            beta: 0.8,
            blind: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
}

const SECTIONS: [&str; 4] = ["model", "train", "decode", "data"];

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut flat = RunConfig::default().to_flat()?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let obj: Map<String, Value> =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (k, v) in obj {
                set_key(&mut flat, k, v)?;
            }
        }
        for (k, v) in overrides {
            set_key(&mut flat, k.clone(), v.clone())?;
        }
        RunConfig::from_flat(&flat)
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let mut nested = Map::new();
        for s in SECTIONS {
            nested.insert(s.into(), Value::Object(Map::new()));
        }
        for (key, v) in flat {
            let (section, field) = split_key(key)?;
            nested[section].as_object_mut().expect("section object").insert(field.into(), v.clone());
        }
        serde_json::from_value(Value::Object(nested)).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every field as a sorted `section.field → value` map.
    pub fn to_flat(&self) -> Result<BTreeMap<String, Value>> {
        let nested = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut flat = BTreeMap::new();
        for (section, fields) in nested.as_object().expect("struct serializes to an object") {
            for (field, v) in fields.as_object().expect("section serializes to an object") {
                flat.insert(format!("{section}.{field}"), v.clone());
            }
        }
        Ok(flat)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()
    }

    /// Writes `resolved_config.json` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("resolved_config.json");
        let mut text = serde_json::to_vec_pretty(&self.to_flat()?).map_err(|e| Error::Config(e.to_string()))?;
        text.push(b'\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn split_key(key: &str) -> Result<(&str, &str)> {
    match key.split_once('.') {
        Some((s, f)) if SECTIONS.contains(&s) && !f.is_empty() => Ok((s, f)),
        _ => Err(Error::Config(format!(
            "key `{key}` must look like <section>.<field> with section one of {SECTIONS:?}"
        ))),
    }
}

fn set_key(flat: &mut BTreeMap<String, Value>, key: String, v: Value) -> Result<()> {
    split_key(&key)?;
    if !flat.contains_key(&key) {
        return Err(Error::Config(format!("unknown config key `{key}`")));
    }
    flat.insert(key, v);
    Ok(())
}

/// Parses `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}
