//! Training configuration and its TOML form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{io_err, MmdgError, Result};
use crate::model::ModelConfig;
use crate::protocol::Imputation;
use crate::regrad::ModulationMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Built-in synthetic domains, generated on the fly.
    Synthetic {
        n_live: usize,
        n_spoof: usize,
        seed: u64,
        /// Overrides every preset's corruption probability when set.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        corruption: Option<f64>,
    },
    /// Tab-separated manifests whose dataset column names the domains.
    Manifest { paths: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the summed SSP losses.
    pub lambda: f64,
    pub prototype_momentum: f64,
    pub modulation: ModulationMode,
    /// Damp the faster modality by its uncertainty during modulation.
    pub regrad_uncertainty: bool,
    /// Smooth the SSP losses used for speed ranking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssp_ema: Option<f64>,
    pub protocol: String,
    pub imputation: Imputation,
    /// Evaluate on the test domains after every epoch.
    pub eval_every_epoch: bool,
    /// Also backpropagate the total classification loss and log how far the
    /// per-modality parts are from it.
    pub check_decomposition: bool,
    /// Epochs of backbone warm-up run by `pretrain`.
    pub pretrain_epochs: usize,
    pub model: ModelConfig,
    pub data: DataSource,
}

impl TrainConfig {
    /// Small CPU preset.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 0.3,
            prototype_momentum: 0.9,
            modulation: ModulationMode::Full,
            regrad_uncertainty: true,
            ssp_ema: None,
            protocol: "cps_w".into(),
            imputation: Imputation::Zero,
            eval_every_epoch: true,
            check_decomposition: false,
            pretrain_epochs: 5,
            model: ModelConfig::desk(),
            data: DataSource::Synthetic {
                n_live: 24,
                n_spoof: 24,
                seed: 0,
                corruption: None,
            },
        }
    }

    /// Reduced geometry for repeated experiments on one core: 16×16 images,
    /// 4×4 patches, width 16, two blocks. The run is only 180 steps long, so
    /// the step size is raised to 3e-3 to get the adapters past the
    /// single-modality loss floor.
    pub fn mini() -> Self {
        let mut c = Self::desk();
        c.lr = 3e-3;
        c.model.backbone = BackboneConfig {
            image_size: 16,
            patch_size: 4,
            hidden_c: 16,
            heads: 2,
            n_blocks: 2,
            mlp_ratio: 2,
            dropout_rate: 0.1,
        };
        if let DataSource::Synthetic {
            n_live, n_spoof, ..
        } = &mut c.data
        {
            *n_live = 16;
            *n_spoof = 16;
        }
        c
    }

    /// Full-size settings: ViT-B geometry, lr 5e-5, weight decay 1e-3,
    /// 70 epochs, batch 32.
    pub fn paper_fidelity() -> Self {
        let mut c = Self::desk();
        c.epochs = 70;
        c.batch_size = 32;
        c.lr = 5e-5;
        c.weight_decay = 1e-3;
        c.model.backbone = BackboneConfig::paper();
        if let DataSource::Synthetic {
            n_live, n_spoof, ..
        } = &mut c.data
        {
            *n_live = 256;
            *n_spoof = 256;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(MmdgError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        let unit = [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("prototype_momentum", self.prototype_momentum),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(MmdgError::Config(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) {
            return Err(MmdgError::Config(
                "weight_decay and lambda must be nonnegative".into(),
            ));
        }
        if let Some(d) = self.ssp_ema {
            if !(0.0..1.0).contains(&d) {
                return Err(MmdgError::Config(format!(
                    "ssp_ema must lie in [0, 1), got {d}"
                )));
            }
        }
        if let DataSource::Synthetic {
            n_live,
            n_spoof,
            corruption,
            ..
        } = &self.data
        {
            if *n_live == 0 || *n_spoof == 0 {
                return Err(MmdgError::Config(
                    "synthetic counts must be positive".into(),
                ));
            }
            if corruption.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
                return Err(MmdgError::Config(
                    "corruption probability outside [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| MmdgError::Toml(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| MmdgError::Toml(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(MmdgError::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}
