//! Command-line front end: dataset generation, offline training,
//! meta-training, adaptation, evaluation and baselines.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aoi_marl::meta::MetaVariant;
use aoi_marl::policies::PolicyKind;
use aoi_marl::Objective;

#[derive(Debug, Parser)]
#[command(name = "aoi-marl", version, about = "Offline multi-agent meta-RL for UAV data collection")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the seeds in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Metric file format.
    #[arg(long, global = true, value_enum, default_value_t = FileFormat::Csv)]
    pub format: FileFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FileFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an online behavior learner and save the tail of its experience.
    GenData {
        /// Transitions per agent to keep.
        #[arg(long)]
        size: Option<usize>,
        /// Generate this many tasks with weights drawn from the task
        /// distribution, one `task-<i>` subdirectory each.
        #[arg(long)]
        tasks: Option<usize>,
        /// Trade-off weight of a single dataset.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Offline training on one dataset.
    Train {
        #[arg(long, value_enum)]
        algo: Algo,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Start from saved weights instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Meta-train an initialization over several task datasets.
    MetaTrain {
        #[arg(long, value_enum)]
        variant: Variant,
        /// Number of tasks to use, taken in order from `--data`.
        #[arg(long)]
        tasks: usize,
        /// Directory holding `task-<i>` dataset subdirectories.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Adapt saved weights to a new task's dataset.
    Adapt {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Plain SGD steps at the inner learning rate.
        #[arg(long, conflicts_with = "epochs")]
        steps: Option<usize>,
        /// Full offline training epochs instead of SGD steps.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
    },
    /// Greedy rollouts of saved weights.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        /// Take the environment and task from this dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Rollouts of a non-learned policy.
    Baseline {
        #[arg(long, value_enum)]
        policy: BaselinePolicy,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algo {
    #[value(name = "i-dqn")]
    IDqn,
    #[value(name = "ctde-dqn")]
    CtdeDqn,
    #[value(name = "i-cql")]
    ICql,
    #[value(name = "ctde-cql")]
    CtdeCql,
}

impl From<Algo> for Objective {
    fn from(a: Algo) -> Self {
        match a {
            Algo::IDqn => Objective::IndependentDqn,
            Algo::CtdeDqn => Objective::CtdeDqn,
            Algo::ICql => Objective::IndependentCql,
            Algo::CtdeCql => Objective::CtdeCql,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    #[value(name = "m-i-cql")]
    MICql,
    #[value(name = "m-ctde-cql")]
    MCtdeCql,
}

impl From<Variant> for MetaVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::MICql => MetaVariant::IndependentCql,
            Variant::MCtdeCql => MetaVariant::CtdeCql,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselinePolicy {
    Rw,
    Det,
}

impl From<BaselinePolicy> for PolicyKind {
    fn from(p: BaselinePolicy) -> Self {
        match p {
            BaselinePolicy::Rw => PolicyKind::Random,
            BaselinePolicy::Det => PolicyKind::Deterministic,
        }
    }
}

pub use commands::run;
