//! TOML configuration with one section per module and `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::inversion::InversionConfig;
use crate::losses::{Ablation, LossWeights};
use crate::optim::AdamConfig;
use crate::trainer::{TrainConfig, TrainerSection};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
    pub trainer: TrainerSection,
    pub ablation: Ablation,
    pub augmentation: AugmentationPolicy,
    pub generator: GeneratorConfig,
    pub inversion: InversionConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            optimizer: self.optimizer,
            trainer: self.trainer.clone(),
            ablation: self.ablation,
            augmentation: self.augmentation.clone(),
            generator: self.generator.clone(),
        }
    }

    /// Applies `section.key=value` overrides in order. Values are parsed as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let keys: Vec<&str> = path.trim().split('.').collect();
            set_path(&mut root, &keys, value).map_err(|e| Error::Config(format!("override `{o}`: {e}")))?;
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(node: &mut toml::Value, keys: &[&str], value: toml::Value) -> std::result::Result<(), String> {
    let (first, rest) = keys.split_first().ok_or("empty key")?;
    let table = node.as_table_mut().ok_or_else(|| format!("`{first}` is not inside a section"))?;
    if rest.is_empty() {
        if !table.contains_key(*first) {
            return Err(format!("unknown key `{first}`"));
        }
        table.insert(first.to_string(), value);
        return Ok(());
    }
    let child = table.get_mut(*first).ok_or_else(|| format!("unknown section `{first}`"))?;
    set_path(child, rest, value)
}
