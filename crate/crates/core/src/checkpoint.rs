//! JSON checkpoints: model config, named tensors, optional training state.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Mat;
use crate::train::{AdamState, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub optimizer: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Mat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, training: Option<TrainingState>) -> Self {
        let tensors = model.params.named_tensors().into_iter().map(|(k, m)| (k, m.clone())).collect();
        Self { format_version: FORMAT_VERSION, config: model.config.clone(), tensors, training }
    }

    /// Rebuilds the model, checking every tensor name and shape.
    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.config.validate()?;
        let mut params = ModelParams::init(&self.config)?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(k, _)| k).collect();
        if names.len() != self.tensors.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for (name, dst) in names.iter().zip(params.tensors_mut()) {
            let src = self.tensors.get(name).ok_or_else(|| Error::Validation(format!("missing tensor `{name}`")))?;
            if src.shape() != dst.shape() || src.data.len() != src.rows * src.cols {
                return Err(Error::Validation(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        for layer in &params.layers {
            layer.check_shapes()?;
        }
        Ok(Model { config: self.config.clone(), params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Writes to a sibling temporary file and renames it over `path`, so
    /// readers never observe a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Validation(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}
