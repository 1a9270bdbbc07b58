//! Declarative model, loss, post-processing and training configuration.
//!
//! `Config::default()` is the full-size profile (256-d embeddings, 300 queries,
//! 6 layers). `Config::desk()` is the small profile used for CPU training and tests.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channels of the first stage (`C_s`).
    pub base_dim: usize,
    /// Embedding width of the transformer (`C_d`).
    pub model_dim: usize,
    /// Adds a fourth, 1/64-resolution level produced from the last stage.
    pub use_extra_level: bool,
    /// Stride of the patchifying stem (stage 1 runs at 1/stem_stride).
    pub stem_stride: usize,
    /// Extra stride-1 3×3 convolutions per stage after the downsampling one.
    pub stage_depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_dim: 96,
            model_dim: 256,
            use_extra_level: false,
            stem_stride: 4,
            stage_depth: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub heads: usize,
    /// Sampling points per head and level.
    pub points: usize,
    /// Encoder and decoder layer count.
    pub layers: usize,
    pub queries: usize,
    pub ffn_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            points: 4,
            layers: 6,
            queries: 300,
            ffn_dim: 1024,
        }
    }
}

/// How a box center is composed from the anchor and the predicted offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxComposition {
    /// `σ(σ⁻¹(p) + d)`.
    InverseSigmoid,
    /// `clamp(p + d, 0, 1)`.
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub object_classes: usize,
    pub action_classes: usize,
    pub composition: BoxComposition,
    /// Prior probability used to initialize classification biases.
    pub prior_prob: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            object_classes: 80,
            action_classes: 117,
            composition: BoxComposition::InverseSigmoid,
            prior_prob: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub class_weight: f64,
    pub action_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub aux_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            class_weight: 2.0,
            action_weight: 2.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            aux_loss: true,
        }
    }
}

/// Which box pair(s) the NMS overlap is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouVariant {
    Human,
    Object,
    Combined,
}

/// Score used to rank queries for the top-K filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKScore {
    Action,
    Object,
    Product,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub top_k: usize,
    pub delta: f64,
    pub iou: IouVariant,
    pub score: TopKScore,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            top_k: 100,
            delta: 0.5,
            iou: IouVariant::Combined,
            score: TopKScore::Object,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("postprocess.top_k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config("postprocess.delta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epoch at which both learning rates are multiplied by `lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    /// Gradient-norm clipping threshold; `0` disables clipping.
    pub clip_max_norm: f64,
    pub batch_size: usize,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    /// Writes a checkpoint every this many epochs (`0`: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            epochs: 150,
            lr_drop_epoch: 120,
            lr_drop_factor: 0.1,
            clip_max_norm: 0.1,
            batch_size: 16,
            max_steps: None,
            checkpoint_every: 0,
        }
    }
}

/// Training data source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Annotation file; when absent, a synthetic set is generated from `synthetic`.
    pub annotations: Option<String>,
    /// Directory holding the images named in the annotation file.
    pub image_dir: Option<String>,
    pub synthetic: crate::data::SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            annotations: None,
            image_dir: None,
            synthetic: crate::data::SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub transformer: TransformerConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub postprocess: NmsConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Config {
    /// Small profile for CPU-scale training and the test suite.
    pub fn desk() -> Self {
        Self {
            backbone: BackboneConfig {
                base_dim: 16,
                model_dim: 64,
                use_extra_level: false,
                stem_stride: 4,
                stage_depth: 0,
            },
            transformer: TransformerConfig {
                heads: 4,
                points: 2,
                layers: 2,
                queries: 20,
                ffn_dim: 128,
            },
            head: HeadConfig {
                object_classes: 2,
                action_classes: 3,
                ..HeadConfig::default()
            },
            loss: LossConfig::default(),
            postprocess: NmsConfig {
                top_k: 20,
                ..NmsConfig::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                lr_backbone: 1e-3,
                weight_decay: 1e-4,
                epochs: 400,
                lr_drop_epoch: 300,
                lr_drop_factor: 0.1,
                clip_max_norm: 0.1,
                batch_size: 4,
                max_steps: Some(2000),
                checkpoint_every: 0,
            },
            data: DataConfig::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        let t = &self.transformer;
        if b.base_dim == 0 || b.model_dim == 0 {
            return Err(Error::Config("backbone dims must be positive".into()));
        }
        if b.stem_stride == 0 {
            return Err(Error::Config(
                "backbone.stem_stride must be positive".into(),
            ));
        }
        if t.heads == 0 || t.points == 0 || t.layers == 0 || t.queries == 0 || t.ffn_dim == 0 {
            return Err(Error::Config(
                "transformer heads/points/layers/queries/ffn_dim must be positive".into(),
            ));
        }
        if b.model_dim % t.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                b.model_dim, t.heads
            )));
        }
        if b.model_dim % 4 != 0 {
            return Err(Error::Config(
                "model_dim must be a multiple of 4 for the 2-D sinusoidal encoding".into(),
            ));
        }
        if self.head.object_classes == 0 || self.head.action_classes == 0 {
            return Err(Error::Config("class counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.loss.focal_alpha) || self.loss.focal_gamma < 0.0 {
            return Err(Error::Config("focal alpha in [0,1], gamma >= 0".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        self.postprocess.validate()
    }

    /// Number of feature levels fed to the encoder.
    pub fn num_levels(&self) -> usize {
        if self.backbone.use_extra_level {
            4
        } else {
            3
        }
    }

    /// Image extents are padded up to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        if self.backbone.use_extra_level {
            64
        } else {
            32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = Config::desk();
        let back = Config::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = Config::from_toml_str("[transformer]\nqueries = 50\n").unwrap();
        assert_eq!(cfg.transformer.queries, 50);
        assert_eq!(cfg.transformer.layers, 6);
        assert_eq!(cfg.backbone.model_dim, 256);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = Config::desk();
        cfg.transformer.heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_bad_delta_and_unknown_keys() {
        assert!(Config::from_toml_str("[postprocess]\ndelta = 1.5\n").is_err());
        assert!(Config::from_toml_str("[backbone]\nbogus = 1\n").is_err());
    }
}
