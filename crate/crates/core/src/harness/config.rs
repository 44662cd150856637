use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{NoiseConfig, DEFAULT_Q_LEVELS};
use crate::crosstransformer::ExchangeConfig;
use crate::data::{generate_task, Dataset, Task, TaskConfig};
use crate::error::{MuseError, Result};
use crate::heads::{DEFAULT_CRF_LR, DEFAULT_HEAD_DROPOUT};
use crate::model::{ModelConfig, ModelVariant};

use super::LossWeights;

/// One training run, as read from a JSON file and command-line overrides.
/// Missing JSON fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub variant: ModelVariant,
    pub d: usize,
    pub num_layers: usize,
    pub heads: usize,
    pub mu: usize,
    pub eta: usize,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub crf_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub head_dropout: f64,
    pub noise_enabled: bool,
    pub noise_std: f64,
    pub seed: u64,
    /// Directory with train/val/test JSON-lines; generated from `seed` when unset.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Mner,
            variant: ModelVariant::Full,
            d: 32,
            num_layers: 6,
            heads: 4,
            mu: 2,
            eta: 4,
            theta: 0.1,
            alpha: 1.0,
            beta: 1.0,
            lr: 1e-3,
            crf_lr: DEFAULT_CRF_LR,
            batch_size: 32,
            epochs: 10,
            dropout: 0.1,
            head_dropout: DEFAULT_HEAD_DROPOUT,
            noise_enabled: true,
            noise_std: 1.0,
            seed: 7,
            data_dir: None,
            out_dir: PathBuf::from("runs/default"),
            train_size: 2000,
            val_size: 500,
            test_size: 500,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn exchange(&self) -> ExchangeConfig {
        ExchangeConfig {
            theta: self.theta,
            mu: self.mu,
            eta: self.eta,
            num_layers: self.num_layers,
            heads: self.heads,
            dim: self.d,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            task: self.task,
            variant: self.variant,
            exchange: self.exchange(),
            ffn_hidden: 2 * self.d,
            dropout: self.dropout,
            head_dropout: self.head_dropout,
            noise: NoiseConfig {
                std_text: self.noise_std,
                std_image: self.noise_std,
                enabled: self.noise_enabled,
            },
            q_levels: DEFAULT_Q_LEVELS,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: if self.variant.caption_loss() {
                self.alpha
            } else {
                0.0
            },
            beta: if self.variant.generation_loss() {
                self.beta
            } else {
                0.0
            },
        }
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            train: self.train_size,
            val: self.val_size,
            test: self.test_size,
            ..TaskConfig::new(self.task, self.seed)
        }
    }

    /// Checks every field before any model state exists.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(MuseError::config("d", "must be at least 1"));
        }
        if self.num_layers == 0 {
            return Err(MuseError::config("num_layers", "must be at least 1"));
        }
        self.exchange().validate()?;
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
        .validate()?;
        for (field, lr) in [("lr", self.lr), ("crf_lr", self.crf_lr)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(MuseError::config(
                    field,
                    format!("{lr} is not a finite non-negative rate"),
                ));
            }
        }
        if self.batch_size == 0 {
            return Err(MuseError::config("batch_size", "must be at least 1"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(MuseError::config(
                "noise_std",
                "must be finite and non-negative",
            ));
        }
        if self.data_dir.is_none() {
            self.task_config().validate()?;
        }
        self.model().validate()
    }

    /// Reads `data_dir` if set, otherwise generates the synthetic task.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data_dir {
            Some(dir) => Dataset::read_dir(dir, self.task),
            None => generate_task(&self.task_config()),
        }
    }
}
