use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::augment::AugmentConfig;
use crate::data::{load_cifar_batches, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{HeadConfig, LossConfig, LossMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticConfig,
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    pub cifar_dir: Option<PathBuf>,
    pub cifar_classes: Vec<usize>,
    pub cifar_train_per_class: Option<usize>,
    pub cifar_test_per_class: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            synthetic: SyntheticConfig::default(),
            cifar_dir: None,
            cifar_classes: (0..5).collect(),
            cifar_train_per_class: Some(500),
            cifar_test_per_class: Some(100),
        }
    }
}

impl DataConfig {
    /// Train and test splits. CIFAR splits follow file boundaries.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self.source {
            DataSource::Synthetic => self.synthetic.splits(),
            DataSource::Cifar => {
                let dir = self
                    .cifar_dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.cifar_dir is required for the cifar source".into()))?;
                let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
                let filter = (!self.cifar_classes.is_empty()).then_some(&self.cifar_classes[..]);
                Ok((
                    load_cifar_batches(&train, filter, self.cifar_train_per_class)?,
                    load_cifar_batches(&[dir.join("test_batch.bin")], filter, self.cifar_test_per_class)?,
                ))
            }
        }
    }
}

/// Self-supervised pretraining configuration. The TOML file mirrors these
/// field names, with `[model]`, `[head]`, `[loss]`, `[augment]` and `[data]`
/// tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub center_momentum: f64,
    pub clip_grad: f64,
    pub seed: u64,
    pub no_distill: bool,
    pub freeze_auxiliary: bool,
    pub shared_heads: bool,
    /// Write a checkpoint every this many epochs (the final one is always written).
    pub checkpoint_every: usize,
    /// Record wall-clock milliseconds in the metric log; disable for
    /// byte-comparable logs.
    pub record_wall_time: bool,
    pub model: ModelConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 50,
            lr: 1e-3,
            final_lr: 1e-5,
            warmup_epochs: 3,
            weight_decay: 0.04,
            ema_start: 0.996,
            ema_end: 1.0,
            center_momentum: 0.9,
            clip_grad: 3.0,
            seed: 0,
            no_distill: false,
            freeze_auxiliary: false,
            shared_heads: false,
            checkpoint_every: 1,
            record_wall_time: true,
            model: ModelConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        for (n, m) in [("ema_start", self.ema_start), ("ema_end", self.ema_end)] {
            if !(0.0..=1.0).contains(&m) {
                return bad(format!("{n} must lie in [0, 1], got {m}"));
            }
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return bad(format!("center_momentum must lie in [0, 1), got {}", self.center_momentum));
        }
        if self.augment.out_size != self.model.image_size {
            return bad(format!(
                "augment.out_size {} must equal model.image_size {}",
                self.augment.out_size, self.model.image_size
            ));
        }
        if self.no_distill && self.freeze_auxiliary {
            return bad("no_distill and freeze_auxiliary are mutually exclusive".into());
        }
        Ok(())
    }

    pub fn loss_mode(&self) -> LossMode {
        if self.freeze_auxiliary || self.model.num_auxiliary() == 0 {
            LossMode::GlobalOnly
        } else if self.no_distill {
            LossMode::NoDistill
        } else {
            LossMode::Distill
        }
    }
}
