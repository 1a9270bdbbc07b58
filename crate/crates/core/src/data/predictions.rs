use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::HoiInstance;

pub const PREDICTION_VERSION: u32 = 1;

/// Ranked detections of one image; boxes are normalized center-size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePredictions {
    pub id: String,
    pub instances: Vec<HoiInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub version: u32,
    pub images: Vec<ImagePredictions>,
}

/// The model's anchor points, written next to a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorFile {
    pub version: u32,
    pub anchors: Vec<[f64; 2]>,
}

fn check_version(found: u32) -> Result<()> {
    if found != PREDICTION_VERSION {
        return Err(Error::SchemaVersion {
            found,
            expected: PREDICTION_VERSION,
        });
    }
    Ok(())
}

impl PredictionFile {
    pub fn new(images: Vec<ImagePredictions>) -> Self {
        Self {
            version: PREDICTION_VERSION,
            images,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        check_version(f.version)?;
        Ok(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

impl AnchorFile {
    pub fn new(anchors: Vec<[f64; 2]>) -> Self {
        Self {
            version: PREDICTION_VERSION,
            anchors,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        check_version(f.version)?;
        Ok(f)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
