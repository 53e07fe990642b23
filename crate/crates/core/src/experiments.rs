//! Reduced-scale experiment setup shared by the CLI presets and the
//! acceptance suite.
//!
//! Tasks form a log-spaced grid of trade-off weights over the range derived
//! by [`derive_lambda_bounds`]; the middle weight is held out for
//! adaptation and the others are available for meta-training.

use crate::data::{generate_offline_dataset, DatasetBundle, RETAINED_FRACTION};
use crate::env::{Env, EnvConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{derive_lambda_bounds, LambdaBounds, MetricsRecord};
use crate::rng;
use crate::trainers::BehaviorConfig;

/// Random-walk episodes used to estimate the trade-off range.
pub const BOUND_EPISODES: usize = 200;
/// Power share of the AoI term at the low and high ends of the range.
pub const BOUND_RATIOS: (f64, f64) = (0.01, 1.0);

#[derive(Debug, Clone)]
pub struct DeskSuite {
    pub env: EnvConfig,
    pub layout_seed: u64,
    /// Transitions per agent in every dataset.
    pub dataset_size: usize,
    pub behavior: BehaviorConfig,
    pub bounds: LambdaBounds,
    /// Grid of task weights, increasing.
    pub lambdas: Vec<f64>,
}

impl DeskSuite {
    /// 5 x 5 grid, 4 devices, 2 UAVs, T = 50, 2000 transitions per agent and
    /// five tasks.
    pub fn standard() -> Result<Self> {
        Self::new(EnvConfig::desk(), 0, 2000, 5)
    }

    pub fn new(env: EnvConfig, layout_seed: u64, dataset_size: usize, n_tasks: usize) -> Result<Self> {
        if n_tasks < 3 || n_tasks % 2 == 0 {
            return Err(Error::Config(format!(
                "the task grid needs an odd number of at least 3 tasks, got {n_tasks}"
            )));
        }
        let probe = Env::new(env.clone(), TaskSpec::new(0.0, layout_seed))?;
        let bounds = derive_lambda_bounds(&probe, BOUND_EPISODES, layout_seed, BOUND_RATIOS.0, BOUND_RATIOS.1)?;
        let lambdas = bounds.log_spaced(n_tasks);
        Ok(DeskSuite {
            env,
            layout_seed,
            dataset_size,
            behavior: BehaviorConfig::default(),
            bounds,
            lambdas,
        })
    }

    pub fn task(&self, k: usize) -> TaskSpec {
        TaskSpec::new(self.lambdas[k], self.layout_seed)
    }

    /// Index of the held-out task.
    pub fn held_out(&self) -> usize {
        self.lambdas.len() / 2
    }

    /// The `n` training tasks closest to the held-out one in log-weight,
    /// lower side first on ties.
    pub fn training_tasks(&self, n: usize) -> Result<Vec<usize>> {
        let h = self.held_out() as isize;
        let mut others: Vec<usize> = (0..self.lambdas.len()).filter(|&k| k as isize != h).collect();
        if n == 0 || n > others.len() {
            return Err(Error::Config(format!("{n} training tasks requested, {} available", others.len())));
        }
        others.sort_by_key(|&k| ((k as isize - h).abs(), k));
        others.truncate(n);
        Ok(others)
    }

    /// Low, middle and high weights of the grid.
    pub fn sweep(&self) -> [usize; 3] {
        [0, self.held_out(), self.lambdas.len() - 1]
    }

    /// Behavior dataset of task `k` for replicate `seed`.
    pub fn dataset(&self, k: usize, seed: u64) -> Result<DatasetBundle> {
        generate_offline_dataset::<f64>(
            &self.env,
            &self.task(k),
            self.dataset_size * RETAINED_FRACTION,
            &self.behavior,
            rng::derive(seed, 0xda7a + k as u64),
        )
    }
}

/// Per-index mean reward over runs of equal length.
pub fn mean_reward_curve(runs: &[Vec<MetricsRecord>]) -> Vec<f64> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| runs.iter().map(|r| r[i].reward).sum::<f64>() / runs.len() as f64)
        .collect()
}

/// First index at which `curve` reaches `target`.
pub fn first_reaching(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&v| v >= target)
}
