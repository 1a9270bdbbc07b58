use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Array;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Self-describing parameter archive: the model configuration and every
/// parameter by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub config: Config,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: usize) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            step,
            config: model.config.clone(),
            params: model
                .store
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                found: c.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Builds a model from `config` and fills it with these parameters; every
    /// parameter of the model must be present with the same shape.
    pub fn restore(&self, config: &Config) -> Result<Model> {
        let mut model = Model::new(config, 0)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for entry in &self.params {
            let id = model
                .store
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", entry.name)))?;
            let want = model.store.value(id).shape().to_vec();
            if want != entry.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in the checkpoint, {want:?} in the model",
                    entry.name, entry.shape
                )));
            }
            let value = Array::new(&entry.shape, entry.values.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", entry.name)))?;
            model.store.set_value(id, value)?;
        }
        Ok(model)
    }
}
