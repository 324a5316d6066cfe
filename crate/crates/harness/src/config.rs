//! Experiment configuration, read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trady_core::cost::ChannelCostTable;
use trady_core::network::NetworkSpec;
use trady_core::selection::{Mode, StrategyKind};

use crate::data::{IdxPaths, SyntheticTask};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum NetworkChoice {
    ToynetResidual {
        #[serde(default = "default_width")]
        width: usize,
    },
    TwoLayer { hidden: usize, out: usize },
}

fn default_width() -> usize {
    8
}

impl Default for NetworkChoice {
    fn default() -> Self {
        Self::ToynetResidual { width: 8 }
    }
}

impl NetworkChoice {
    pub fn build(&self, input: [usize; 3], classes: usize) -> NetworkSpec {
        match *self {
            Self::ToynetResidual { width } => NetworkSpec::toynet_residual_width(input, width, classes),
            Self::TwoLayer { hidden, out } => NetworkSpec::two_layer(input, hidden, out, classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticTask),
    Idx {
        #[serde(flatten)]
        paths: IdxPaths,
        #[serde(default)]
        classes: Option<usize>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic(SyntheticTask::default())
    }
}

/// Where the layer pool of a pool-based strategy comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PoolSource {
    All,
    Layers { layers: Vec<usize> },
    /// Smallest set of layers capturing `theta` of the layer RGN measured on
    /// the starting weights.
    TopK { theta: f64 },
}

impl Default for PoolSource {
    fn default() -> Self {
        Self::TopK { theta: 0.97 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Absolute number of memory slots.
    Slots(usize),
    /// Fraction of the backbone's total memory cost.
    Fraction(f64),
    /// Fraction of the backbone's activation slots only.
    ActivationFraction(f64),
}

impl Budget {
    pub fn resolve(&self, table: &ChannelCostTable) -> usize {
        match *self {
            Self::Slots(s) => s,
            Self::Fraction(f) => (f * table.total_slots() as f64).floor() as usize,
            Self::ActivationFraction(f) => (f * table.total_activation_slots() as f64).floor() as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub label: String,
    pub network: NetworkChoice,
    pub data: DataSource,
    pub strategy: StrategyKind,
    pub mode: Mode,
    pub pool: PoolSource,
    pub budget: Budget,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_max: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Starting weights; a fresh initialization is used when absent.
    pub checkpoint: Option<PathBuf>,
    /// Replace the loaded classifier with a fresh one sized for this task.
    pub reinit_classifier: bool,
    /// Estimate the heavy-tail index of each epoch's stochastic gradients.
    pub collect_alpha: bool,
    /// Standardize inputs per channel with training-set statistics.
    pub standardize: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: "run".into(),
            network: NetworkChoice::default(),
            data: DataSource::default(),
            strategy: StrategyKind::TopKRandom,
            mode: Mode::Dynamic,
            pool: PoolSource::default(),
            budget: Budget::Fraction(0.15),
            epochs: 30,
            warmup_epochs: 5,
            lr_max: 0.125,
            batch_size: 32,
            seeds: vec![0],
            checkpoint: None,
            reinit_classifier: true,
            collect_alpha: false,
            standardize: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&text).map_err(|e| HarnessError::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warm-up epochs {} must be fewer than epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return bad(format!("lr_max must be non-negative, got {}", self.lr_max));
        }
        match self.budget {
            Budget::Fraction(f) | Budget::ActivationFraction(f) if !(0.0..=1.0).contains(&f) => {
                return bad(format!("budget fraction {f} is outside [0, 1]"));
            }
            _ => {}
        }
        if let PoolSource::TopK { theta } = self.pool {
            if !(theta > 0.0 && theta <= 1.0) {
                return bad(format!("top-k theta {theta} is outside (0, 1]"));
            }
        }
        Ok(())
    }
}
