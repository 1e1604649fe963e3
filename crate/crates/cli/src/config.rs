//! Run configuration: TOML with a default for every field, unknown keys
//! rejected, echoed verbatim into every artifact a run produces.

use cdre_core::backbone::{BackboneFamily, BackboneSpec};
use cdre_core::distortion::Conditioning;
use cdre_core::rng::fnv1a64;
use cdre_core::training::{ModelConfig, ModelKind, Regime, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single root seed; all randomness in a run derives from it.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub codec: CodecSection,
    pub backbone: BackboneSection,
    pub cdre: CdreSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub train_n: usize,
    pub eval_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    /// Base-codec qualities sampled during training.
    pub train_qualities: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub family: String,
    /// Stage dims; empty means the family default.
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdreSection {
    pub channels: usize,
    pub embedding_depth: usize,
    pub conditioning: String,
    pub multi_scale: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub regime: String,
    pub lambda: f64,
    pub steps: u64,
    pub lr: f64,
    pub backbone_lr: f64,
    pub batch_size: usize,
    pub use_cosine_reg: bool,
    /// Baseline checkpoint whose downstream weights seed fd/joint runs.
    pub init_from: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub qualities: Vec<u8>,
    pub include_side_channel: bool,
    /// Steps of the shared baseline pretraining inside `ablate`.
    pub pretrain_steps: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSection::default(),
            codec: CodecSection::default(),
            backbone: BackboneSection::default(),
            cdre: CdreSection::default(),
            training: TrainingSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            train_n: 256,
            eval_n: 128,
        }
    }
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            train_qualities: vec![10, 30, 50, 70, 90],
        }
    }
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            family: "cnn".into(),
            dims: Vec::new(),
        }
    }
}

impl Default for CdreSection {
    fn default() -> Self {
        Self {
            channels: 6,
            embedding_depth: 4,
            conditioning: "modulation".into(),
            multi_scale: true,
        }
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            regime: "fd".into(),
            lambda: 0.1,
            steps: 2000,
            lr: 1e-3,
            backbone_lr: 1e-4,
            batch_size: 8,
            use_cosine_reg: true,
            init_from: String::new(),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            qualities: vec![10, 30, 50, 70, 90],
            include_side_channel: true,
            pretrain_steps: 600,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical serialized form (every field explicit).
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Fingerprint embedded into produced artifacts.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.echo().as_bytes())
    }

    pub fn family(&self) -> Result<BackboneFamily> {
        Ok(BackboneFamily::from_str(&self.backbone.family)?)
    }

    pub fn regime(&self) -> Result<Regime> {
        Ok(Regime::from_str(&self.training.regime)?)
    }

    /// Core model structure for the given kind.
    pub fn model_config(&self, kind: ModelKind) -> Result<ModelConfig> {
        let family = self.family()?;
        let mut dims = family.default_dims();
        if !self.backbone.dims.is_empty() {
            if self.backbone.dims.len() != 4 {
                return Err(CliError::Usage(
                    "backbone.dims must list exactly 4 stage dims".into(),
                ));
            }
            dims.copy_from_slice(&self.backbone.dims);
        }
        let cfg = ModelConfig {
            kind,
            backbone: BackboneSpec {
                family,
                stage_dims: dims,
            },
            latent_channels: self.cdre.channels,
            embedding_depth: self.cdre.embedding_depth,
            conditioning: Conditioning::from_str(&self.cdre.conditioning)?,
            multi_scale: self.cdre.multi_scale,
            token_dim: dims[0],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Core training settings.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            regime: self.regime()?,
            lambda: self.training.lambda,
            steps: self.training.steps,
            lr: self.training.lr,
            backbone_lr: self.training.backbone_lr,
            batch_size: self.training.batch_size,
            seed: self.seed,
            train_qualities: self.codec.train_qualities.clone(),
            train_n: self.dataset.train_n,
            use_cosine_reg: self.training.use_cosine_reg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
