//! First-order MAML over tasks that differ in their trade-off weight.
//!
//! Each outer step adapts the shared initialization to every task with a
//! few plain SGD steps on support minibatches, evaluates the conservative
//! loss of the adapted weights on a query minibatch, and moves the
//! initialization along the sum of the query gradients taken at the adapted
//! weights. Every task keeps its own target networks, refreshed from its
//! adapted weights.

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetBundle, SupportQuerySplit};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsRecord};
use crate::losses::{Minibatch, Objective};
use crate::qnet::{NetParams, Optimizer, OptimizerKind, DEFAULT_HIDDEN};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::trainers::init_nets;

/// Meta-learning variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetaVariant {
    #[serde(rename = "m-i-cql")]
    IndependentCql,
    #[serde(rename = "m-ctde-cql")]
    CtdeCql,
}

impl MetaVariant {
    pub fn tag(self) -> &'static str {
        match self {
            MetaVariant::IndependentCql => "m-i-cql",
            MetaVariant::CtdeCql => "m-ctde-cql",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        [MetaVariant::IndependentCql, MetaVariant::CtdeCql]
            .into_iter()
            .find(|v| v.tag() == tag)
    }

    /// Loss optimized in both loops.
    pub fn objective(self) -> Objective {
        match self {
            MetaVariant::IndependentCql => Objective::IndependentCql,
            MetaVariant::CtdeCql => Objective::CtdeCql,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub variant: MetaVariant,
    /// Plain SGD step of the inner loop. With He-uniform networks the outer
    /// loop can diverge when this is too large; 1e-3 is stable on the desk
    /// network where 1e-2 is not.
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// SGD steps per task in the inner loop.
    pub inner_steps: usize,
    pub epochs: usize,
    /// Only the first-order approximation is implemented.
    pub first_order: bool,
    pub outer_optimizer: OptimizerKind,
    /// Fraction of each task's data used as support set.
    pub support_ratio: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub batch_size: usize,
    /// Outer steps between refreshes of each task's target networks with
    /// the task-adapted weights of the current initialization.
    pub target_sync: usize,
    pub hidden: Vec<usize>,
    pub reward_scale: f64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            variant: MetaVariant::CtdeCql,
            inner_lr: 1e-2,
            outer_lr: 1e-3,
            inner_steps: 1,
            epochs: 100,
            first_order: true,
            outer_optimizer: OptimizerKind::Adam,
            support_ratio: 0.5,
            gamma: 0.99,
            alpha: 1.0,
            batch_size: 128,
            target_sync: 200,
            hidden: DEFAULT_HIDDEN.to_vec(),
            reward_scale: 1.0,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.first_order {
            return Err(Error::Unsupported("second-order meta-gradients"));
        }
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return bad(format!("inner_lr must be non-negative, got {}", self.inner_lr));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return bad(format!("outer_lr must be positive, got {}", self.outer_lr));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.batch_size == 0 || self.target_sync == 0 {
            return bad("batch_size and target_sync must be positive".into());
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad(format!("reward_scale must be positive, got {}", self.reward_scale));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }
}

/// Minibatches of one task for one outer step.
#[derive(Debug, Clone)]
pub struct TaskBatches<S> {
    /// One support batch per inner step.
    pub support: Vec<Minibatch<S>>,
    pub query: Minibatch<S>,
}

/// Inner-loop hyperparameters shared by all tasks.
#[derive(Debug, Clone, Copy)]
pub struct InnerLoop<S> {
    pub objective: Objective,
    pub gamma: S,
    pub alpha: S,
    pub lr: S,
}

impl<S: Scalar> InnerLoop<S> {
    pub fn from_config(cfg: &MetaConfig) -> Self {
        InnerLoop {
            objective: cfg.variant.objective(),
            gamma: S::of(cfg.gamma),
            alpha: S::of(cfg.alpha),
            lr: S::of(cfg.inner_lr),
        }
    }
}

/// Adapted weights after one plain SGD step per support batch. `theta` is
/// left untouched.
pub fn inner_update<S: Scalar>(
    theta: &[NetParams<S>],
    targets: &[NetParams<S>],
    support: &[Minibatch<S>],
    inner: &InnerLoop<S>,
) -> Result<Vec<NetParams<S>>> {
    let mut adapted = theta.to_vec();
    for batch in support {
        let lg = inner
            .objective
            .evaluate(&adapted, targets, batch, inner.gamma, inner.alpha)?;
        for (p, g) in adapted.iter_mut().zip(&lg.grads) {
            p.axpy(-inner.lr, g)?;
        }
    }
    Ok(adapted)
}

/// Meta-loss with its first-order gradient.
#[derive(Debug, Clone)]
pub struct MetaLoss<S> {
    /// Sum of the query losses over tasks.
    pub loss: S,
    pub task_losses: Vec<S>,
    /// Per-agent sum over tasks of the query gradient at the adapted weights.
    pub grads: Vec<NetParams<S>>,
    /// Adapted weights of every task.
    pub adapted: Vec<Vec<NetParams<S>>>,
}

/// Sums the query losses of the adapted weights over tasks. `targets[i]`
/// are task `i`'s target networks.
pub fn meta_loss<S: Scalar>(
    theta: &[NetParams<S>],
    targets: &[Vec<NetParams<S>>],
    tasks: &[TaskBatches<S>],
    inner: &InnerLoop<S>,
) -> Result<MetaLoss<S>> {
    if tasks.is_empty() {
        return Err(Error::Usage("meta-loss needs at least one task".into()));
    }
    if targets.len() != tasks.len() {
        return Err(Error::dim("task target networks", tasks.len(), targets.len()));
    }
    let mut out = MetaLoss {
        loss: S::zero(),
        task_losses: Vec::with_capacity(tasks.len()),
        grads: theta.iter().map(NetParams::zeros_like).collect(),
        adapted: Vec::with_capacity(tasks.len()),
    };
    for (task, tgt) in tasks.iter().zip(targets) {
        let adapted = inner_update(theta, tgt, &task.support, inner)?;
        let lg = inner
            .objective
            .evaluate(&adapted, tgt, &task.query, inner.gamma, inner.alpha)?;
        out.loss += lg.loss;
        out.task_losses.push(lg.loss);
        for (acc, g) in out.grads.iter_mut().zip(&lg.grads) {
            acc.axpy(S::one(), g)?;
        }
        out.adapted.push(adapted);
    }
    Ok(out)
}

/// Applies the meta-gradient to the initialization.
pub fn outer_update<S: Scalar>(
    theta: &mut [NetParams<S>],
    grads: &[NetParams<S>],
    optimizers: &mut [Optimizer<S>],
    lr: S,
) -> Result<()> {
    if grads.len() != theta.len() || optimizers.len() != theta.len() {
        return Err(Error::dim("meta-gradient agents", theta.len(), grads.len()));
    }
    for ((p, g), opt) in theta.iter_mut().zip(grads).zip(optimizers) {
        opt.apply(p, g, lr)?;
    }
    Ok(())
}

/// Mean meta-loss of one meta-epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEpochRecord {
    pub epoch: usize,
    pub meta_loss: f64,
    pub outer_steps: usize,
}

#[derive(Debug, Clone)]
pub struct MetaOutcome<S> {
    /// Meta-learned initialization, one network per agent.
    pub nets: Vec<NetParams<S>>,
    pub history: Vec<MetaEpochRecord>,
}

/// Sampling state of one training task.
struct TaskState<'a> {
    bundle: &'a DatasetBundle,
    split: SupportQuerySplit,
    support_rng: Rng,
    query_rng: Rng,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl TaskState<'_> {
    fn next_query(&mut self, batch_size: usize) -> Vec<usize> {
        if let Some(b) = self.pending.next() {
            return b;
        }
        self.pending = data::epoch_batches(&self.split.query, batch_size, &mut self.query_rng).into_iter();
        self.pending.next().expect("query set is non-empty")
    }
}

/// Checks that the tasks share an environment and have distinct weights.
fn check_tasks(bundles: &[DatasetBundle]) -> Result<()> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::Usage("meta-training needs at least one task".into()))?;
    for (i, b) in bundles.iter().enumerate() {
        if b.meta.env != first.meta.env {
            return Err(Error::Usage(format!("task {i} uses a different environment than task 0")));
        }
        for (j, other) in bundles[..i].iter().enumerate() {
            if other.task().lambda == b.task().lambda {
                return Err(Error::Usage(format!(
                    "tasks {j} and {i} share lambda = {}",
                    b.task().lambda
                )));
            }
        }
    }
    Ok(())
}

/// Query-stream label of task `i`. Task 0 shares its stream with the
/// offline trainer's shuffle, so a single task with `inner_lr = 0` and SGD
/// outer steps replays offline training on its query set.
fn query_stream(i: usize) -> u64 {
    1 + 0x100 * i as u64
}

/// Split seed of task `i`.
pub fn split_seed(seed: u64, i: usize) -> u64 {
    rng::derive(seed, 0x5eed_0000 + i as u64)
}

/// Meta-trains an initialization over one dataset per task. One epoch is
/// one pass over the largest query set.
pub fn meta_train<S: Scalar>(bundles: &[DatasetBundle], cfg: &MetaConfig) -> Result<MetaOutcome<S>> {
    cfg.validate()?;
    check_tasks(bundles)?;
    let env_cfg = &bundles[0].meta.env;
    let mut tasks = Vec::with_capacity(bundles.len());
    for (i, b) in bundles.iter().enumerate() {
        let split = data::split_support_query(b, cfg.support_ratio, split_seed(cfg.seed, i))?;
        tasks.push(TaskState {
            bundle: b,
            split,
            support_rng: rng::stream(cfg.seed, 2 + 0x100 * i as u64),
            query_rng: rng::stream(cfg.seed, query_stream(i)),
            pending: Vec::new().into_iter(),
        });
    }
    let mut theta: Vec<NetParams<S>> = init_nets(env_cfg, &cfg.hidden, cfg.seed);
    let mut targets: Vec<Vec<NetParams<S>>> = vec![theta.clone(); tasks.len()];
    let mut opts: Vec<Optimizer<S>> = theta.iter().map(|n| Optimizer::new(cfg.outer_optimizer, n)).collect();
    let inner = InnerLoop::<S>::from_config(cfg);
    let outer_lr = S::of(cfg.outer_lr);

    let longest = tasks.iter().map(|t| t.split.query.len()).max().unwrap_or(0);
    let steps_per_epoch = longest.div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let batches = tasks
                .iter_mut()
                .map(|t| {
                    let n = cfg.batch_size.min(t.split.support.len());
                    let support = (0..cfg.inner_steps)
                        .map(|_| data::sample_minibatch(t.bundle, &t.split.support, n, cfg.reward_scale, &mut t.support_rng))
                        .collect::<Result<Vec<_>>>()?;
                    let q = t.next_query(cfg.batch_size);
                    Ok(TaskBatches {
                        support,
                        query: data::gather(t.bundle, &q, cfg.reward_scale),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let ml = meta_loss(&theta, &targets, &batches, &inner)?;
            outer_update(&mut theta, &ml.grads, &mut opts, outer_lr)?;
            total += ml.loss.as_f64();
            step += 1;
            if step % cfg.target_sync == 0 {
                for (t, b) in targets.iter_mut().zip(&batches) {
                    *t = inner_update(&theta, t, &b.support, &inner)?;
                }
            }
        }
        if !theta.iter().all(NetParams::is_finite) {
            return Err(Error::NonFinite("meta parameters"));
        }
        history.push(MetaEpochRecord {
            epoch,
            meta_loss: total / steps_per_epoch as f64,
            outer_steps: step,
        });
    }
    Ok(MetaOutcome { nets: theta, history })
}

/// Result of few-step adaptation.
#[derive(Debug, Clone)]
pub struct AdaptOutcome<S> {
    pub nets: Vec<NetParams<S>>,
    pub before: MetricsRecord,
    pub after: MetricsRecord,
}

/// `steps` plain SGD steps at `cfg.inner_lr` on minibatches of a new
/// task's data, starting from `init`, with greedy evaluation before and
/// after.
pub fn adapt<S: Scalar>(
    init: &[NetParams<S>],
    bundle: &DatasetBundle,
    steps: usize,
    cfg: &MetaConfig,
    eval_episodes: usize,
) -> Result<AdaptOutcome<S>> {
    cfg.validate()?;
    let env = bundle.env()?;
    if init.len() != bundle.n_agents() {
        return Err(Error::dim("initial networks", bundle.n_agents(), init.len()));
    }
    let tag = cfg.variant.tag();
    let eval_seed = rng::derive(cfg.seed, 0xe7a1);
    let before = eval::evaluate_greedy(&env, init, eval_episodes, eval_seed, tag)?;
    let inner = InnerLoop::<S>::from_config(cfg);
    let all: Vec<usize> = (0..bundle.len()).collect();
    let n = cfg.batch_size.min(all.len());
    let mut rng = rng::stream(cfg.seed, 4);
    let mut nets = init.to_vec();
    let mut targets = init.to_vec();
    for k in 0..steps {
        let batch = data::sample_minibatch(bundle, &all, n, cfg.reward_scale, &mut rng)?;
        nets = inner_update(&nets, &targets, std::slice::from_ref(&batch), &inner)?;
        if (k + 1) % cfg.target_sync == 0 {
            targets.clone_from(&nets);
        }
    }
    let after = if steps == 0 {
        before.clone()
    } else {
        eval::evaluate_greedy(&env, &nets, eval_episodes, eval_seed, tag)?
    };
    Ok(AdaptOutcome { nets, before, after })
}
