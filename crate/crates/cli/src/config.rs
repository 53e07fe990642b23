//! Experiment configuration file.
//!
//! A TOML document with one optional table per module. Every key has a
//! default; see `configs/` for complete examples.
//!
//! ```toml
//! [env]        # grid, radio and horizon; defaults to the full-size network
//! [task]       # lambda and layout_seed of the task under study
//! [tasks]      # task distribution for meta-training
//! [behavior]   # online learner that collects datasets
//! [data]       # dataset size
//! [train]      # offline training
//! [meta]       # meta-training and adaptation
//! [eval]       # evaluation episodes
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use aoi_marl::env::{Env, EnvConfig, TaskSpec};
use aoi_marl::eval::{derive_lambda_bounds, LambdaBounds};
use aoi_marl::experiments::{BOUND_EPISODES, BOUND_RATIOS};
use aoi_marl::meta::MetaConfig;
use aoi_marl::trainers::{BehaviorConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub env: EnvConfig,
    pub task: TaskSection,
    pub tasks: TaskDistribution,
    pub behavior: BehaviorConfig,
    pub data: DataSection,
    pub train: TrainConfig,
    pub meta: MetaConfig,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// Trade-off weight; the geometric middle of the derived range when
    /// absent.
    pub lambda: Option<f64>,
    pub layout_seed: u64,
}

/// Log-uniform distribution of trade-off weights. Missing bounds are
/// derived from random-walk statistics of the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskDistribution {
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    /// Power share of the AoI term at the derived low and high ends.
    pub low_ratio: f64,
    pub high_ratio: f64,
}

impl Default for TaskDistribution {
    fn default() -> Self {
        TaskDistribution {
            lambda_min: None,
            lambda_max: None,
            low_ratio: BOUND_RATIOS.0,
            high_ratio: BOUND_RATIOS.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Transitions per agent kept from the behavior run.
    pub size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { size: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes: 10 }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate().with_context(|| format!("validating {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.behavior.validate()?;
        self.train.validate()?;
        self.meta.validate()?;
        if let Some(l) = self.task.lambda {
            TaskSpec::new(l, 0).validate()?;
        }
        if self.data.size == 0 {
            bail!("data.size must be positive");
        }
        if self.eval.episodes == 0 {
            bail!("eval.episodes must be positive");
        }
        let t = &self.tasks;
        if let (Some(lo), Some(hi)) = (t.lambda_min, t.lambda_max) {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                bail!("tasks.lambda_min and tasks.lambda_max must satisfy 0 < min <= max");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Weight range of the task distribution.
    pub fn lambda_bounds(&self) -> Result<LambdaBounds> {
        let probe = Env::new(self.env.clone(), TaskSpec::new(0.0, self.task.layout_seed))?;
        let t = &self.tasks;
        let derived = || {
            derive_lambda_bounds(&probe, BOUND_EPISODES, self.task.layout_seed, t.low_ratio, t.high_ratio)
        };
        Ok(match (t.lambda_min, t.lambda_max) {
            (Some(min), Some(max)) => LambdaBounds {
                min,
                max,
                aoi_term: f64::NAN,
                power: f64::NAN,
            },
            (min, max) => {
                let d = derived()?;
                LambdaBounds {
                    min: min.unwrap_or(d.min),
                    max: max.unwrap_or(d.max),
                    ..d
                }
            }
        })
    }

    /// The task under study.
    pub fn task(&self) -> Result<TaskSpec> {
        let lambda = match self.task.lambda {
            Some(l) => l,
            None => {
                let b = self.lambda_bounds()?;
                (b.min * b.max).sqrt()
            }
        };
        Ok(TaskSpec::new(lambda, self.task.layout_seed))
    }
}
