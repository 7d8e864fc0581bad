//! Flat-key TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sbi_vfm::eval::C2stConfig;
use sbi_vfm::flowmatch::{Method, TimePrior, TrainConfig};
use sbi_vfm::nncore::Activation;
use sbi_vfm::rng::split_seed;
use sbi_vfm::tasks::{BoxTaskConfig, SgmConfig, TaskConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Sgm,
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationName {
    Gelu,
    Relu,
}

/// One experiment cell. Every key is optional except `task` and `method`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,

    // sgm
    #[serde(default = "d::sgm_k")]
    pub sgm_k: usize,
    #[serde(default = "d::sgm_t")]
    pub sgm_t: usize,
    #[serde(default = "d::sgm_dx")]
    pub sgm_dx: usize,
    /// Seed of the frozen SGM dynamics, independent of `seed`.
    #[serde(default)]
    pub sgm_seed: u64,

    // box
    #[serde(default = "d::box_dim")]
    pub box_dim: usize,
    #[serde(default = "d::sigma_obs")]
    pub sigma_obs: f64,

    // network
    #[serde(default = "d::hidden")]
    pub hidden: usize,
    #[serde(default = "d::blocks")]
    pub blocks: usize,
    #[serde(default = "d::activation")]
    pub activation: ActivationName,

    // training
    #[serde(default = "d::n_sims")]
    pub n_sims: usize,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::lr")]
    pub lr: f64,
    #[serde(default = "d::epochs")]
    pub epochs: usize,
    pub max_steps: Option<usize>,
    #[serde(default = "d::val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub time_prior_alpha: f64,
    #[serde(default = "d::grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "d::plateau_factor")]
    pub plateau_factor: f64,
    #[serde(default = "d::plateau_patience")]
    pub plateau_patience: usize,

    // sampling and evaluation
    #[serde(default = "d::n_obs")]
    pub n_obs: usize,
    #[serde(default = "d::n_posterior")]
    pub n_posterior: usize,
    #[serde(default = "d::steps")]
    pub steps: usize,
    #[serde(default = "d::c2st_hidden")]
    pub c2st_hidden: usize,
    #[serde(default = "d::c2st_folds")]
    pub c2st_folds: usize,
    #[serde(default = "d::c2st_max_epochs")]
    pub c2st_max_epochs: usize,
    #[serde(default = "d::c2st_patience")]
    pub c2st_patience: usize,
    #[serde(default = "d::c2st_batch_size")]
    pub c2st_batch_size: usize,
    #[serde(default = "d::lr")]
    pub c2st_lr: f64,
}

mod d {
    use super::ActivationName;

    pub fn sgm_k() -> usize {
        10
    }
    pub fn sgm_t() -> usize {
        10
    }
    pub fn sgm_dx() -> usize {
        5
    }
    pub fn box_dim() -> usize {
        2
    }
    pub fn sigma_obs() -> f64 {
        0.25
    }
    pub fn hidden() -> usize {
        64
    }
    pub fn blocks() -> usize {
        2
    }
    pub fn activation() -> ActivationName {
        ActivationName::Gelu
    }
    pub fn n_sims() -> usize {
        10_000
    }
    pub fn batch_size() -> usize {
        1024
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn epochs() -> usize {
        100
    }
    pub fn val_fraction() -> f64 {
        0.05
    }
    pub fn grad_clip() -> f64 {
        1.0
    }
    pub fn plateau_factor() -> f64 {
        0.5
    }
    pub fn plateau_patience() -> usize {
        50
    }
    pub fn n_obs() -> usize {
        10
    }
    pub fn n_posterior() -> usize {
        10_000
    }
    pub fn steps() -> usize {
        100
    }
    pub fn c2st_hidden() -> usize {
        128
    }
    pub fn c2st_folds() -> usize {
        5
    }
    pub fn c2st_max_epochs() -> usize {
        100
    }
    pub fn c2st_patience() -> usize {
        5
    }
    pub fn c2st_batch_size() -> usize {
        256
    }
}

impl ExperimentConfig {
    /// A config with every optional key at its default.
    pub fn new(task: TaskKind, method: Method) -> Self {
        toml::from_str(&format!("task = \"{task}\"\nmethod = \"{}\"\n", method.as_str())).expect("defaults parse")
    }

    pub fn parse(text: &str, origin: &Path) -> CliResult<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {}", origin.display(), e.to_string().trim_end())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The config without its run location. This is what a run directory
    /// stores and what the hash covers, so moving a run changes nothing.
    pub fn snapshot(&self) -> String {
        ExperimentConfig { out: None, ..self.clone() }.to_toml()
    }

    pub fn validate(&self) -> CliResult<()> {
        self.task_config()?;
        TimePrior::new(self.time_prior_alpha)?;
        self.train_config().validate()?;
        self.c2st_config(0).validate()?;
        if self.hidden == 0 {
            return Err(CliError::Config("hidden must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(CliError::Config("steps must be >= 1".into()));
        }
        if self.n_obs == 0 {
            return Err(CliError::Config("n_obs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn task_config(&self) -> CliResult<TaskConfig> {
        let cfg = match self.task {
            TaskKind::Sgm => {
                let c = SgmConfig {
                    k: self.sgm_k,
                    t: self.sgm_t,
                    dx: self.sgm_dx,
                    seed: self.sgm_seed,
                };
                c.validate()?;
                TaskConfig::Sgm(c)
            }
            TaskKind::Box => TaskConfig::Box(BoxTaskConfig::new(self.box_dim, self.sigma_obs)?),
        };
        Ok(cfg)
    }

    pub fn activation(&self) -> Activation {
        match self.activation {
            ActivationName::Gelu => Activation::Gelu,
            ActivationName::Relu => Activation::Relu,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            epochs: self.epochs,
            max_steps: self.max_steps,
            val_fraction: self.val_fraction,
            time_prior: TimePrior::new(self.time_prior_alpha).unwrap_or_default(),
            grad_clip: self.grad_clip,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            seed: self.stage_seed("train"),
        }
    }

    pub fn c2st_config(&self, seed: u64) -> C2stConfig {
        C2stConfig {
            hidden: self.c2st_hidden,
            folds: self.c2st_folds,
            max_epochs: self.c2st_max_epochs,
            patience: self.c2st_patience,
            batch_size: self.c2st_batch_size,
            lr: self.c2st_lr,
            val_fraction: 0.1,
            seed,
        }
    }

    /// Seed of one pipeline stage, derived from the master seed by name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        split_seed(self.seed, stage)
    }

    /// Hex SHA-256 of the snapshot.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.snapshot().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Sgm => "sgm",
            TaskKind::Box => "box",
        })
    }
}
