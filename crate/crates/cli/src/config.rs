//! Training run configuration: file loading, flag overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flowstate::data::Synthetic;
use flowstate::model::ModelConfig;
use flowstate::train::TrainConfig;

use crate::UsageError;

/// Where training series come from: a dataset file or a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// `auto`, `long` or `wide`.
    pub format: String,
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<Synthetic>,
    /// Number of generated series.
    pub count: usize,
    /// Length of each generated series.
    pub length: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: "auto".into(),
            manifest: None,
            synthetic: None,
            count: 64,
            length: 720,
            synthetic_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Reads TOML, or JSON for a `.json` extension. Relative data paths are
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config `{}`: {e}", path.display())))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.path, &mut cfg.data.manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let field = |section: &str, e: flowstate::Error| UsageError(format!("[{section}] {e}"));
        self.model.validate().map_err(|e| field("model", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        match (&self.data.path, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(UsageError("[data] set either `path` or `synthetic`, not both".into())),
            (None, None) => return Err(UsageError("[data] one of `path` or `synthetic` is required".into())),
            (None, Some(_)) if self.data.count == 0 || self.data.length == 0 => {
                return Err(UsageError("[data] `count` and `length` must be positive".into()))
            }
            _ => {}
        }
        crate::commands::parse_format(&self.data.format)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
