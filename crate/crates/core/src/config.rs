//! Experiment configuration, read from and snapshotted to TOML.
//!
//! ```toml
//! silos = 2
//! clients = [2, 3]          # or a single count for every silo
//! local_steps = 5
//! learning_rate = 0.01
//! batch_size = 16
//! rounds = 100
//!
//! [model]
//! architecture = "linear"   # or "mlp" with `hidden = 16`
//!
//! [loss]
//! kind = "squared_error"
//!
//! [latency]
//! t_comm = 100.0
//! t_comp = 1.0
//!
//! [seeds]
//! data = 1
//! init = 2
//! batch = 3
//! shard = 4
//!
//! [dataset]
//! source = "synthetic"
//! samples = 256
//! features = 8
//! task = "least_squares"
//! noise = 0.1
//! ```
//!
//! Every seed must be given; nothing is drawn from the environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clock::LatencyModel;
use crate::error::{Error, Result};
use crate::model::{Architecture, LossKind, LossSpec};
use crate::protocol::ProtocolConfig;
use crate::synthetic::SyntheticSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// N
    pub silos: usize,
    /// K_j
    pub clients: Clients,
    /// Q
    pub local_steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// R
    pub rounds: u64,
    #[serde(default)]
    pub eval_every_iteration: bool,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Also write `bound_report.json`.
    #[serde(default)]
    pub bound_report: bool,
    pub model: ModelConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub latency: LatencyModel,
    pub seeds: Seeds,
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_top_k() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Clients {
    Uniform(usize),
    PerSilo(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: ArchitectureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    /// Feature count per silo, contiguous in column order. Default: an
    /// even split with the remainder going to the first silos.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub silo_dims: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub batch: u64,
    pub shard: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
    },
    Csv {
        path: PathBuf,
        label_column: String,
    },
    Binary {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LocalSteps,
    LearningRate,
    Silos,
    Clients,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::LocalSteps => "local_steps",
            SweepAxis::LearningRate => "learning_rate",
            SweepAxis::Silos => "silos",
            SweepAxis::Clients => "clients",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Pick η per run from this grid by lowest training loss after
    /// `grid_iterations` local iterations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_iterations: Option<u64>,
    /// Report the loss each run has reached by this clock value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock_budget: Option<f64>,
    /// Default: the loss the best run reaches at 80% of its clock budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.silos == 0 {
            return Err(Error::config("silos must be >= 1"));
        }
        let counts = self.client_counts()?;
        if let Some(j) = counts.iter().position(|&k| k == 0) {
            return Err(Error::config(format!("silo {j} needs at least one client")));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be >= 1"));
        }
        self.protocol_config().validate()?;
        if self.model.architecture == ArchitectureKind::Mlp && self.model.hidden.map_or(true, |h| h == 0) {
            return Err(Error::config("model.hidden must be >= 1 for an mlp"));
        }
        if self.model.architecture == ArchitectureKind::Linear && self.model.hidden.is_some() {
            return Err(Error::config("model.hidden only applies to mlp"));
        }
        if let Some(dims) = &self.model.silo_dims {
            if dims.len() != self.silos {
                return Err(Error::config(format!(
                    "model.silo_dims has {} entries for {} silos",
                    dims.len(),
                    self.silos
                )));
            }
        }
        let loss = self.loss_spec()?;
        loss.validate(loss.required_embedding_dim())?;
        match &self.dataset {
            DatasetConfig::Synthetic { spec } => spec.validate()?,
            DatasetConfig::Csv { label_column, .. } if label_column.is_empty() => {
                return Err(Error::config("dataset.label_column must not be empty"))
            }
            _ => {}
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::config("sweep.values must not be empty"));
            }
            for &v in &sweep.values {
                self.with_axis(sweep.axis, v)?;
            }
            if let Some(grid) = &sweep.eta_grid {
                if grid.is_empty() || grid.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
                    return Err(Error::config("sweep.eta_grid must hold finite rates >= 0"));
                }
                if sweep.axis == SweepAxis::LearningRate {
                    return Err(Error::config("eta_grid cannot be combined with a learning_rate sweep"));
                }
            }
            if sweep.clock_budget.is_some_and(|b| !(b.is_finite() && b >= 0.0)) {
                return Err(Error::config("sweep.clock_budget must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn client_counts(&self) -> Result<Vec<usize>> {
        match &self.clients {
            Clients::Uniform(k) => Ok(vec![*k; self.silos]),
            Clients::PerSilo(ks) if ks.len() == self.silos => Ok(ks.clone()),
            Clients::PerSilo(ks) => Err(Error::config(format!(
                "clients lists {} counts for {} silos",
                ks.len(),
                self.silos
            ))),
        }
    }

    pub fn loss_spec(&self) -> Result<LossSpec> {
        match (self.loss.kind, self.loss.classes) {
            (LossKind::SoftmaxCrossEntropy, Some(c)) => Ok(LossSpec::softmax(c)),
            (LossKind::SoftmaxCrossEntropy, None) => Err(Error::config("loss.classes is required for softmax")),
            (_, Some(_)) => Err(Error::config("loss.classes only applies to softmax")),
            (LossKind::SquaredError, None) => Ok(LossSpec::squared_error()),
            (LossKind::BinaryCrossEntropyWithLogit, None) => Ok(LossSpec::binary_logistic()),
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self.model.architecture {
            ArchitectureKind::Linear => Architecture::Linear,
            ArchitectureKind::Mlp => Architecture::Mlp {
                hidden: self.model.hidden.unwrap_or(0),
            },
        }
    }

    /// Per-silo feature counts for a dataset with `features` columns.
    pub fn silo_dims(&self, features: usize) -> Result<Vec<usize>> {
        if let Some(d) = &self.model.silo_dims {
            return Ok(d.clone());
        }
        if features < self.silos {
            return Err(Error::config(format!("{features} features cannot be split across {} silos", self.silos)));
        }
        let (base, extra) = (features / self.silos, features % self.silos);
        Ok((0..self.silos).map(|j| base + usize::from(j < extra)).collect())
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            local_steps: self.local_steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            batch_seed: self.seeds.batch,
            latency: self.latency,
            eval_every_iteration: self.eval_every_iteration,
            record_iterates: self.bound_report,
            smoothness: None,
        }
    }

    /// A copy with one field replaced by a sweep value. The sweep table
    /// itself is dropped from the copy.
    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut out = self.clone();
        out.sweep = None;
        let count = || -> Result<usize> {
            if value.fract() == 0.0 && value >= 1.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::config(format!("sweep value {value} must be a positive integer")))
            }
        };
        match axis {
            SweepAxis::LocalSteps => out.local_steps = count()? as u64,
            SweepAxis::LearningRate => {
                if !(value.is_finite() && value >= 0.0) {
                    return Err(Error::config(format!("sweep learning rate {value} must be finite and >= 0")));
                }
                out.learning_rate = value;
            }
            SweepAxis::Silos => {
                if out.model.silo_dims.is_some() {
                    return Err(Error::config("a silos sweep needs model.silo_dims unset"));
                }
                out.silos = count()?;
                if let Clients::PerSilo(ks) = &out.clients {
                    if ks.windows(2).any(|w| w[0] != w[1]) {
                        return Err(Error::config("a silos sweep needs one client count for every silo"));
                    }
                    out.clients = Clients::Uniform(ks[0]);
                }
            }
            SweepAxis::Clients => out.clients = Clients::Uniform(count()?),
        }
        Ok(out)
    }

    /// Make dataset paths absolute relative to `base`, so a snapshot can
    /// be rerun from anywhere.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Csv { path, .. } | DatasetConfig::Binary { path } = &mut self.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}
