//! TOML experiment configuration.
//!
//! Every key is optional. Nested tables can be written as flat dotted keys:
//!
//! ```toml
//! seed = 7
//! backbone.base_channels = 8
//! backbone.mask_policy.r_lower = 0.43
//! train.max_iterations = 2000
//! eval.alphas = [1, 2, 4, 6, 8]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::LossTarget;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// LR patch side.
    pub patch_size: usize,
    pub scale: usize,
    /// Number of pairs to extract.
    pub count: usize,
    /// Side of procedurally generated source images.
    pub synthetic_side: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            scale: 2,
            count: 256,
            synthetic_side: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Attack budgets as numerators over 255; 0 (clean) is always added.
    pub alphas: Vec<u32>,
    pub iterations: usize,
    pub loss_target: LossTarget,
    /// Budgets evaluated by the ablation runner.
    pub ablation_alphas: Vec<u32>,
    /// Share of the dataset held out by the ablation runner.
    pub test_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alphas: vec![1, 2, 4, 6, 8],
            iterations: 10,
            loss_target: LossTarget::GroundTruth,
            ablation_alphas: vec![0, 4, 8],
            test_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub dataset: DatasetConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Sets the top-level seed and the training seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate(&self.backbone)?;
        if self.dataset.scale != self.backbone.scale {
            return Err(Error::Config(format!(
                "dataset.scale {} differs from backbone.scale {}",
                self.dataset.scale, self.backbone.scale
            )));
        }
        if self.eval.iterations == 0 {
            return Err(Error::Config("eval.iterations must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval.test_fraction) {
            return Err(Error::Config(
                "eval.test_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }
}
