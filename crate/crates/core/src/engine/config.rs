use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::compensate::StrategyConfig;
use crate::gaussmem::CovarianceMode;
use crate::model::ModelConfig;
use crate::numerics::AdamConfig;
use crate::synthdata::DatasetConfig;
use crate::{Error, Result};

/// Optimisation and loss settings for every task of a run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Weight of the old-class loss group.
    pub alpha: f64,
    pub strategy: StrategyConfig,
    pub covariance: CovarianceMode,
    /// Cross-entropy of synthetic old features through the unified head.
    pub old_cls: bool,
    /// Feature distillation against the previous extractor.
    pub feature_kd: bool,
    /// Logit distillation against the previous unified head.
    pub logit_kd: bool,
    /// Softmax temperature for logit distillation.
    pub kd_temperature: f64,
    /// Restricts the new-class cross-entropy to current-task logits instead
    /// of all seen classes.
    pub restrict_new_cls: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            adam: AdamConfig::default(),
            milestones: vec![14, 27],
            lr_decay: 0.1,
            alpha: 15.0,
            strategy: StrategyConfig::default(),
            covariance: CovarianceMode::PerClass,
            old_cls: true,
            feature_kd: true,
            logit_kd: true,
            kd_temperature: 1.0,
            restrict_new_cls: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect during `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| m <= epoch).count();
        let mut lr = self.adam.learning_rate;
        for _ in 0..decays {
            lr *= self.lr_decay;
        }
        lr
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be at least 1".into());
        }
        if !(self.alpha >= 0.0) {
            errs.push(format!("loss.alpha must be >= 0, got {}", self.alpha));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            errs.push("train.milestones must be strictly increasing".into());
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) {
            errs.push("train.milestones must be below train.epochs".into());
        }
        if !(self.lr_decay > 0.0) {
            errs.push("train.lr_decay must be positive".into());
        }
        if !(self.kd_temperature > 0.0) {
            errs.push("loss.kd_temperature must be positive".into());
        }
        if let Err(e) = self.adam.validate() {
            errs.push(format!("{}", e));
        }
        if let Err(e) = self.strategy.validate() {
            errs.push(format!("{}", e));
        }
        errs
    }
}

/// `B + C x T` class split.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProtocolConfig {
    pub base: usize,
    pub per_phase: usize,
    pub phases: usize,
    pub order_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            base: 10,
            per_phase: 2,
            phases: 5,
            order_seed: 0,
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExperimentConfig {
    pub data: DatasetConfig,
    pub protocol: ProtocolConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Collects every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut errs = self.train.validate();
        let p = &self.protocol;
        if p.base + p.per_phase * p.phases != self.data.class_count {
            errs.push(format!(
                "tasks.B + tasks.C * tasks.T = {} + {} * {} must equal data.classes = {}",
                p.base, p.per_phase, p.phases, self.data.class_count
            ));
        }
        if p.base == 0 {
            errs.push("tasks.B must be at least 1".into());
        }
        if self.model.input_dim != self.data.side * self.data.side {
            errs.push(format!(
                "model input {} does not match data.side^2 = {}",
                self.model.input_dim,
                self.data.side * self.data.side
            ));
        }
        if self.model.feature_dim == 0 || self.model.hidden.iter().any(|&h| h == 0) {
            errs.push("model widths must be positive".into());
        }
        if self.data.per_class_train < 2 {
            errs.push("data.train_per_class must be at least 2 to estimate class statistics".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
