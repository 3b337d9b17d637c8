//! Experiment configuration (TOML), presets and cross-field validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{theorem2_rate, ConvergenceParams};
use crate::bgm::{BgmParams, Component};
use crate::error::{Error, Result};
use crate::gamp::GampOptions;
use crate::model::{OptimizerConfig, PARAM_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    FedqcsEa,
    FedqcsAe,
    QcsQiht,
    QcsDither,
    Signsgd,
    Perfect,
}

impl Framework {
    pub const ALL: [Framework; 6] = [
        Framework::FedqcsEa,
        Framework::FedqcsAe,
        Framework::QcsQiht,
        Framework::QcsDither,
        Framework::Signsgd,
        Framework::Perfect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Framework::FedqcsEa => "fedqcs_ea",
            Framework::FedqcsAe => "fedqcs_ae",
            Framework::QcsQiht => "qcs_qiht",
            Framework::QcsDither => "qcs_dither",
            Framework::Signsgd => "signsgd",
            Framework::Perfect => "perfect",
        }
    }

    /// Block sparsification, projection and scalar quantization on devices.
    pub fn uses_block_compression(self) -> bool {
        !matches!(self, Framework::Signsgd | Framework::Perfect)
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Framework::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Framework::ALL.iter().map(|f| f.name()).collect();
                Error::config("framework", format!("unknown framework {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Server optimizer. `sgd_theorem2` resolves to SGD with the fixed rate of
/// the convergence result for the configured `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSetting {
    Adam {
        lr: f64,
    },
    Sgd {
        eta: f64,
    },
    SgdTheorem2 {
        beta: f64,
        epsilon: f64,
    },
}

impl Default for OptimizerSetting {
    fn default() -> Self {
        OptimizerSetting::Adam { lr: 0.003 }
    }
}

impl OptimizerSetting {
    pub fn resolve(&self, rounds: usize) -> Result<OptimizerConfig> {
        let cfg = match *self {
            OptimizerSetting::Adam { lr } => OptimizerConfig::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            OptimizerSetting::Sgd { eta } => OptimizerConfig::Sgd { eta },
            OptimizerSetting::SgdTheorem2 { beta, epsilon } => {
                let (eta, _) = theorem2_rate(&ConvergenceParams {
                    beta,
                    sigma2: 0.0,
                    epsilon,
                    rounds: rounds.max(1),
                    loss_gap: 0.0,
                })?;
                OptimizerConfig::Sgd { eta }
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Mnist {
        /// Directory with the IDX files; `$FEDQCS_DATA` or `data/mnist` if absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root: Option<PathBuf>,
        samples_per_device: usize,
        test_samples: usize,
        batch_size: usize,
    },
    /// IID draws from `theta` instead of model gradients; no training.
    Synthetic { theta: BgmParams, dimension: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub framework: Framework,
    /// Number of devices `K`.
    pub devices: usize,
    /// Blocks per gradient `B`.
    pub blocks: usize,
    pub s_ratio: f64,
    /// Dimension reduction ratio `R`.
    pub ratio: f64,
    /// Quantizer bits `Q`.
    pub bits: u32,
    /// Aggregate-and-estimate groups `G`.
    pub groups: usize,
    /// Rounds `T`.
    pub rounds: usize,
    pub seed: u64,
    pub optimizer: OptimizerSetting,
    /// Server step for the majority vote of sign compression.
    pub sign_lr: f64,
    pub eval_every: usize,
    /// Rounds between checkpoints when writing to an output directory; 0 disables.
    pub checkpoint_every: usize,
    pub qiht_iters: usize,
    /// Track `||g^ - g||^2 / ||grad F||^2` with a full local-data gradient each round.
    pub measure_epsilon: bool,
    pub gamp: GampOptions,
    pub data: DataConfig,
    pub out: PathBuf,
}

pub const PRESETS: [&str; 4] = ["desk", "fig3", "full", "synthetic"];

impl ExperimentConfig {
    /// Ten devices with 100 samples each, 2000 test images, (R, Q) = (3, 3).
    pub fn desk() -> Self {
        ExperimentConfig {
            framework: Framework::FedqcsEa,
            devices: 10,
            blocks: 10,
            s_ratio: 0.05,
            ratio: 3.0,
            bits: 3,
            groups: 1,
            rounds: 2000,
            seed: 1,
            optimizer: OptimizerSetting::default(),
            sign_lr: 1e-3,
            eval_every: 50,
            checkpoint_every: 500,
            qiht_iters: crate::baselines::QIHT_ITERS,
            measure_epsilon: false,
            gamp: GampOptions::default(),
            data: DataConfig::Mnist {
                root: None,
                samples_per_device: 100,
                test_samples: 2000,
                batch_size: 1,
            },
            out: PathBuf::from("runs/desk"),
        }
    }

    /// Desk scale with denser evaluation, for the framework comparison.
    pub fn fig3() -> Self {
        ExperimentConfig {
            rounds: 1000,
            eval_every: 20,
            out: PathBuf::from("runs/fig3"),
            ..Self::desk()
        }
    }

    /// Thirty devices with 1000 samples each and the full test set; needs the
    /// complete MNIST files under the data root.
    pub fn full() -> Self {
        ExperimentConfig {
            devices: 30,
            data: DataConfig::Mnist {
                root: None,
                samples_per_device: 1000,
                test_samples: 10_000,
                batch_size: 1,
            },
            out: PathBuf::from("runs/full"),
            ..Self::desk()
        }
    }

    /// Bernoulli-Gaussian gradients of model size, aggregate-and-estimate.
    pub fn synthetic() -> Self {
        ExperimentConfig {
            framework: Framework::FedqcsAe,
            devices: 4,
            s_ratio: 1.0,
            rounds: 20,
            eval_every: 1,
            checkpoint_every: 0,
            data: DataConfig::Synthetic {
                theta: BgmParams {
                    lambda0: 0.9,
                    components: vec![Component {
                        weight: 0.1,
                        mean: 0.0,
                        var: 1.0,
                    }],
                },
                dimension: PARAM_COUNT,
            },
            out: PathBuf::from("runs/synthetic"),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "fig3" => Ok(Self::fig3()),
            "full" => Ok(Self::full()),
            "synthetic" => Ok(Self::synthetic()),
            _ => Err(Error::config("preset", format!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Gradient length: the model size, or the synthetic dimension.
    pub fn dimension(&self) -> usize {
        match &self.data {
            DataConfig::Mnist { .. } => PARAM_COUNT,
            DataConfig::Synthetic { dimension, .. } => *dimension,
        }
    }

    pub fn block_len(&self) -> usize {
        self.dimension().div_ceil(self.blocks.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            return Err(Error::config("devices", "must be at least 1"));
        }
        if self.blocks == 0 || self.blocks > self.dimension() {
            return Err(Error::config("blocks", format!("must be in 1..={}", self.dimension())));
        }
        if !(self.s_ratio > 0.0 && self.s_ratio <= 1.0) {
            return Err(Error::config("s_ratio", format!("must lie in (0, 1], got {}", self.s_ratio)));
        }
        if !(self.ratio >= 1.0) || !self.ratio.is_finite() {
            return Err(Error::config("ratio", format!("must be >= 1, got {}", self.ratio)));
        }
        if !(1..=6).contains(&self.bits) {
            return Err(Error::config("bits", format!("must be in 1..=6, got {}", self.bits)));
        }
        if self.groups == 0 || self.groups > self.devices {
            return Err(Error::config("groups", format!("need 1 <= G <= K = {}, got {}", self.devices, self.groups)));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if !(self.sign_lr > 0.0) {
            return Err(Error::config("sign_lr", "must be positive"));
        }
        if self.qiht_iters == 0 {
            return Err(Error::config("qiht_iters", "must be at least 1"));
        }
        self.gamp.validate()?;
        self.optimizer.resolve(self.rounds)?;
        match &self.data {
            DataConfig::Mnist {
                samples_per_device,
                test_samples,
                batch_size,
                ..
            } => {
                if self.devices % 10 != 0 {
                    return Err(Error::config("devices", "label-sorted partition needs a multiple of 10"));
                }
                if *batch_size == 0 || batch_size > samples_per_device {
                    return Err(Error::config("batch_size", "must be in 1..=samples_per_device"));
                }
                if *test_samples == 0 {
                    return Err(Error::config("test_samples", "must be positive"));
                }
            }
            DataConfig::Synthetic { theta, dimension } => {
                theta.validate().map_err(|e| Error::config("data.theta", e.to_string()))?;
                if *dimension == 0 {
                    return Err(Error::config("data.dimension", "must be positive"));
                }
                if matches!(self.framework, Framework::Signsgd) {
                    return Err(Error::config("framework", "sign compression needs a model; use MNIST data"));
                }
                if self.measure_epsilon {
                    return Err(Error::config("measure_epsilon", "needs MNIST data"));
                }
            }
        }
        if self.framework.uses_block_compression() {
            let m = crate::sensing::measurement_count(self.block_len(), self.ratio)?;
            if m > self.block_len() {
                return Err(Error::config("ratio", "more measurements than block entries"));
            }
        }
        Ok(())
    }

    /// Sets one sweep axis from its textual value.
    pub fn set_axis(&mut self, axis: SweepAxis, value: &str) -> Result<()> {
        let bad = |e: String| Error::config(axis.name(), e);
        match axis {
            SweepAxis::Bits => self.bits = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            SweepAxis::Ratio => self.ratio = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            SweepAxis::SRatio => self.s_ratio = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            SweepAxis::Groups => self.groups = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Bits,
    Ratio,
    SRatio,
    Groups,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Bits => "Q",
            SweepAxis::Ratio => "R",
            SweepAxis::SRatio => "S_ratio",
            SweepAxis::Groups => "G",
        }
    }
}

/// `AXIS=v1,v2,...` with `AXIS` one of `Q`, `R`, `S_ratio`, `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
}

impl FromStr for SweepSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (axis, values) = s
            .split_once('=')
            .ok_or_else(|| Error::config("sweep", format!("expected AXIS=v1,v2,..., got {s:?}")))?;
        let axis = match axis.trim() {
            "Q" => SweepAxis::Bits,
            "R" => SweepAxis::Ratio,
            "S_ratio" => SweepAxis::SRatio,
            "G" => SweepAxis::Groups,
            other => return Err(Error::config("sweep", format!("unknown axis {other:?}; expected Q, R, S_ratio or G"))),
        };
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::config("sweep", "no values given"));
        }
        Ok(SweepSpec { axis, values })
    }
}
