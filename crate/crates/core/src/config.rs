//! Run configuration files.
//!
//! A file is a JSON object with optional `preset`, `model`, `train` and
//! `data` sections. The preset supplies the base model (`full`, `toy` or
//! `tiny`); every other key overrides it field by field. Unknown keys at any
//! depth are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// File name of the echoed configuration in every output directory.
pub const RESOLVED_NAME: &str = "config.resolved.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Hiera-L / DINOv2-L shapes at 1024 / 448.
    #[default]
    Full,
    Toy,
    Tiny,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::default(),
            Preset::Toy => ModelConfig::toy(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

/// Dataset location: `root` with `images/` and `masks/`, or both
/// directories given explicitly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub root: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub masks: Option<PathBuf>,
}

impl DataPaths {
    /// `(images, masks)`, or `None` when nothing is configured.
    pub fn dirs(&self) -> Result<Option<(PathBuf, PathBuf)>> {
        match (&self.root, &self.images, &self.masks) {
            (None, None, None) => Ok(None),
            (Some(r), None, None) => Ok(Some((r.join("images"), r.join("masks")))),
            (None, Some(i), Some(m)) => Ok(Some((i.clone(), m.clone()))),
            _ => Err(Error::Config("data needs either `root` or both `images` and `masks`".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self::from_preset(Preset::default())
    }
}

/// Recursively overwrites `base` with `over`; keys absent from `base` are
/// kept so that deserialization can reject them by name.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfigFile {
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            preset,
            model: preset.model(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(obj) = &over else {
            return Err(Error::Config("configuration must be a JSON object".into()));
        };
        let preset = match obj.get("preset") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => Preset::default(),
        };
        let mut base = serde_json::to_value(Self::from_preset(preset))?;
        merge(&mut base, over);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.dirs()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `config.resolved.json` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))
    }
}
