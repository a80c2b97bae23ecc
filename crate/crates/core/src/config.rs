//! Run configuration shared by every command. Every field has a default and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::flow::{FlowTrainConfig, FLOW_LAYERS};
use crate::metrics::{DIVERSITY_PROTOCOL_K, RANDOM_PROTOCOL_K};
use crate::model::ModelConfig;
use crate::motion::GaitConfigSampler;
use crate::nn::AdamConfig;
use crate::objectives::TrainSchedule;
use crate::sampler::SamplerLossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
    pub test_fraction: f64,
    pub gait: GaitConfigSampler,
    /// Directory of motion files to window instead of synthesizing.
    pub import_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            test_fraction: 0.1,
            gait: GaitConfigSampler::default(),
            import_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            batch_size: 64,
            epochs: 500,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(argument!("{what}: learning rate or betas out of range"));
        }
        if self.batch_size == 0 || !(self.eps > 0.0) {
            return Err(argument!("{what}: batch_size and eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub layers: usize,
    pub optimizer: OptimizerConfig,
    pub dequantization_std: f64,
    /// Every `pose_stride`-th training frame is used.
    pub pose_stride: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: FLOW_LAYERS,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                epochs: 300,
                batch_size: 256,
                ..OptimizerConfig::default()
            },
            dequantization_std: 0.01,
            pose_stride: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub k: usize,
    pub hidden_dim: usize,
    pub optimizer: OptimizerConfig,
    pub weights: SamplerLossWeights,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: DIVERSITY_PROTOCOL_K,
            hidden_dim: 128,
            optimizer: OptimizerConfig {
                epochs: 100,
                ..OptimizerConfig::default()
            },
            weights: SamplerLossWeights::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_random: usize,
    pub k_diversity: usize,
    /// Caps the number of test conditions evaluated.
    pub max_conditions: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_random: RANDOM_PROTOCOL_K,
            k_diversity: DIVERSITY_PROTOCOL_K,
            max_conditions: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub optimizer: OptimizerConfig,
    pub flow: FlowConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            model: ModelConfig::default(),
            dataset: DatasetConfig::default(),
            optimizer: OptimizerConfig::default(),
            flow: FlowConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate("optimizer")?;
        self.flow.optimizer.validate("flow.optimizer")?;
        self.sampler.optimizer.validate("sampler.optimizer")?;
        self.sampler.weights.validate()?;
        if !(0.0..1.0).contains(&self.dataset.test_fraction) {
            return Err(argument!("dataset.test_fraction must lie in [0, 1)"));
        }
        if self.flow.layers == 0 || self.flow.dequantization_std < 0.0 {
            return Err(argument!("flow needs at least one layer and a nonnegative noise std"));
        }
        if self.sampler.k < 2 || self.eval.k_random < 2 || self.eval.k_diversity < 2 {
            return Err(argument!("K must be at least 2"));
        }
        Ok(())
    }

    pub fn model_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.optimizer.epochs,
            batch_size: self.optimizer.batch_size,
            adam: self.optimizer.adam(),
            seed: self.seed,
        }
    }

    pub fn sampler_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.sampler.optimizer.epochs,
            batch_size: self.sampler.optimizer.batch_size,
            adam: self.sampler.optimizer.adam(),
            seed: self.seed,
        }
    }

    pub fn flow_schedule(&self) -> FlowTrainConfig {
        FlowTrainConfig {
            epochs: self.flow.optimizer.epochs,
            batch_size: self.flow.optimizer.batch_size,
            adam: self.flow.optimizer.adam(),
            dequantization_std: self.flow.dequantization_std,
            seed: self.seed,
        }
    }
}
