use serde::{Deserialize, Serialize};

use crate::dataset::LabelScheme;
use crate::error::{Error, Result};
use crate::flow::TvL1Params;
use crate::model::ModelConfig;
use crate::protocols::Protocol;

/// Optimizer and schedule settings of one protocol run.
///
/// `learning_rate`, `momentum` and `scheme` default per protocol when left
/// out of a config file: 0.001 without momentum for CDE, 0.0005 with
/// momentum 0.8 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TrainConfigFile")]
pub struct TrainConfig {
    pub protocol: Protocol,
    pub scheme: LabelScheme,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    pub rounds: usize,
    /// Worker-pool width; `None` uses every available core. `FR_THREADS`
    /// caps it either way.
    pub threads: Option<usize>,
    /// Write shared and fused features of every test clip to `features.bin`.
    pub export_features: bool,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainConfigFile {
    protocol: Protocol,
    scheme: Option<LabelScheme>,
    batch_size: usize,
    learning_rate: Option<f64>,
    momentum: Option<f64>,
    epochs: usize,
    seed: u64,
    rounds: usize,
    threads: Option<usize>,
    export_features: bool,
}

impl Default for TrainConfigFile {
    fn default() -> Self {
        let d = TrainConfig::new(Protocol::Cde);
        TrainConfigFile {
            protocol: d.protocol,
            scheme: None,
            batch_size: d.batch_size,
            learning_rate: None,
            momentum: None,
            epochs: d.epochs,
            seed: d.seed,
            rounds: d.rounds,
            threads: d.threads,
            export_features: d.export_features,
        }
    }
}

impl From<TrainConfigFile> for TrainConfig {
    fn from(f: TrainConfigFile) -> Self {
        let d = TrainConfig::new(f.protocol);
        TrainConfig {
            protocol: f.protocol,
            scheme: f.scheme.unwrap_or(d.scheme),
            batch_size: f.batch_size,
            learning_rate: f.learning_rate.unwrap_or(d.learning_rate),
            momentum: f.momentum.unwrap_or(d.momentum),
            epochs: f.epochs,
            seed: f.seed,
            rounds: f.rounds,
            threads: f.threads,
            export_features: f.export_features,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(Protocol::Cde)
    }
}

impl TrainConfig {
    /// Defaults of `protocol`.
    pub fn new(protocol: Protocol) -> Self {
        let (learning_rate, momentum) = match protocol {
            Protocol::Cde => (0.001, 0.0),
            Protocol::Single | Protocol::Cdmer => (0.0005, 0.8),
        };
        TrainConfig {
            protocol,
            scheme: protocol.default_scheme(),
            batch_size: 32,
            learning_rate,
            momentum,
            epochs: 100,
            seed: 0,
            rounds: 1,
            threads: None,
            export_features: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("train: {msg}")));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.rounds == 0 {
            return bad("epochs and rounds must be at least 1".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        Ok(())
    }
}

/// Everything that determines a run; `config.json` in a run directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub flow: TvL1Params,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.flow.validate()?;
        if self.model.num_classes != self.train.scheme.num_classes() {
            return Err(Error::Config(format!(
                "model has {} classes but label scheme {} has {}",
                self.model.num_classes,
                self.train.scheme,
                self.train.scheme.num_classes()
            )));
        }
        Ok(())
    }
}
