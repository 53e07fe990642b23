//! Training loops: offline Q-learning over a fixed dataset for the four
//! objectives, and the online epsilon-greedy DQN used to collect data.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetBundle, Transition};
use crate::env::{AgentAction, Env, EnvConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsRecord};
use crate::losses::{self, LossGrad, Minibatch, Objective};
use crate::policies;
use crate::qnet::{NetParams, Optimizer, OptimizerKind, DEFAULT_HIDDEN};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

/// Offline training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algo: Objective,
    pub gamma: f64,
    /// Conservative weight; ignored by the DQN objectives.
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Gradient steps between hard target-network copies.
    pub target_sync: usize,
    /// Greedy evaluation episodes after every epoch.
    pub eval_episodes: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    /// Multiplies stored rewards before they enter the loss. Positive
    /// rescaling leaves the greedy policy of the optimal Q unchanged.
    pub reward_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algo: Objective::IndependentCql,
            gamma: 0.99,
            alpha: 1.0,
            lr: 1e-3,
            batch_size: 128,
            epochs: 100,
            target_sync: 200,
            eval_episodes: 1,
            seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            optimizer: OptimizerKind::Adam,
            reward_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
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

/// Final networks and the per-epoch metric series (epoch 0 is the
/// untrained initialization).
#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub nets: Vec<NetParams<S>>,
    pub metrics: Vec<MetricsRecord>,
}

/// Freshly initialized per-agent networks for `env_cfg`.
pub fn init_nets<S: Scalar>(env_cfg: &EnvConfig, hidden: &[usize], seed: u64) -> Vec<NetParams<S>> {
    (0..env_cfg.n_uavs)
        .map(|u| NetParams::init(env_cfg.obs_dim(), hidden, env_cfg.n_actions(), rng::derive(seed, 0x100 + u as u64)))
        .collect()
}

/// Online networks, their targets and optimizer state.
#[derive(Debug, Clone)]
pub struct OfflineLearner<S> {
    pub nets: Vec<NetParams<S>>,
    pub targets: Vec<NetParams<S>>,
    optimizers: Vec<Optimizer<S>>,
    steps: usize,
    algo: Objective,
    gamma: S,
    alpha: S,
    lr: S,
    target_sync: usize,
}

impl<S: Scalar> OfflineLearner<S> {
    pub fn new(nets: Vec<NetParams<S>>, cfg: &TrainConfig) -> Self {
        let optimizers = nets.iter().map(|n| Optimizer::new(cfg.optimizer, n)).collect();
        OfflineLearner {
            targets: nets.clone(),
            nets,
            optimizers,
            steps: 0,
            algo: cfg.algo,
            gamma: S::of(cfg.gamma),
            alpha: S::of(cfg.alpha),
            lr: S::of(cfg.lr),
            target_sync: cfg.target_sync,
        }
    }

    /// Gradient steps taken so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One optimizer step on `batch`; copies online into target networks
    /// every `target_sync` steps.
    pub fn step(&mut self, batch: &Minibatch<S>) -> Result<LossGrad<S>> {
        let lg = self
            .algo
            .evaluate(&self.nets, &self.targets, batch, self.gamma, self.alpha)?;
        for ((net, opt), g) in self.nets.iter_mut().zip(&mut self.optimizers).zip(&lg.grads) {
            opt.apply(net, g, self.lr)?;
        }
        self.steps += 1;
        if self.steps % self.target_sync == 0 {
            self.targets.clone_from(&self.nets);
        }
        Ok(lg)
    }

    /// One shuffled pass over `part`; returns the mean loss.
    pub fn epoch(
        &mut self,
        bundle: &DatasetBundle,
        part: &[usize],
        batch_size: usize,
        reward_scale: f64,
        rng: &mut Rng,
    ) -> Result<f64> {
        let batches = data::epoch_batches(part, batch_size, rng);
        if batches.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        for idx in &batches {
            let mb = data::gather::<S>(bundle, idx, reward_scale);
            total += self.step(&mb)?.loss.as_f64();
        }
        if !self.nets.iter().all(NetParams::is_finite) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(total / batches.len() as f64)
    }
}

fn check_nets<S: Scalar>(nets: &[NetParams<S>], env_cfg: &EnvConfig) -> Result<()> {
    if nets.len() != env_cfg.n_uavs {
        return Err(Error::dim("networks", env_cfg.n_uavs, nets.len()));
    }
    for n in nets {
        if n.in_dim() != env_cfg.obs_dim() {
            return Err(Error::dim("network input", env_cfg.obs_dim(), n.in_dim()));
        }
        if n.out_dim() != env_cfg.n_actions() {
            return Err(Error::dim("network output", env_cfg.n_actions(), n.out_dim()));
        }
    }
    Ok(())
}

/// Trains from fresh networks over the whole dataset.
pub fn train_offline<S: Scalar>(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainOutcome<S>> {
    train_offline_from(bundle, cfg, None)
}

/// Trains over the whole dataset, starting from `init` when given.
pub fn train_offline_from<S: Scalar>(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    init: Option<Vec<NetParams<S>>>,
) -> Result<TrainOutcome<S>> {
    let all: Vec<usize> = (0..bundle.len()).collect();
    train_offline_on(bundle, &all, cfg, init)
}

/// Trains on the dataset entries listed in `part`.
pub fn train_offline_on<S: Scalar>(
    bundle: &DatasetBundle,
    part: &[usize],
    cfg: &TrainConfig,
    init: Option<Vec<NetParams<S>>>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if part.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let env = bundle.env()?;
    let nets = init.unwrap_or_else(|| init_nets(&bundle.meta.env, &cfg.hidden, cfg.seed));
    check_nets(&nets, &bundle.meta.env)?;

    let tag = cfg.algo.tag();
    let eval_seed = rng::derive(cfg.seed, 0xe7a1);
    let mut learner = OfflineLearner::new(nets, cfg);
    let mut metrics = Vec::with_capacity(cfg.epochs + 1);
    let mut rec = eval::evaluate_greedy(&env, &learner.nets, cfg.eval_episodes, eval_seed, tag)?;
    rec.index = 0;
    metrics.push(rec);

    let mut shuffle = rng::stream(cfg.seed, 1);
    for epoch in 1..=cfg.epochs {
        let loss = learner.epoch(bundle, part, cfg.batch_size, cfg.reward_scale, &mut shuffle)?;
        let mut rec = eval::evaluate_greedy(&env, &learner.nets, cfg.eval_episodes, eval_seed, tag)?;
        rec.index = epoch;
        rec.loss = Some(loss);
        metrics.push(rec);
    }
    Ok(TrainOutcome {
        nets: learner.nets,
        metrics,
    })
}

/// Hyperparameters of the online data-collection learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    /// Replay window: the most recent transitions eligible for sampling.
    pub buffer: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the run over which epsilon anneals linearly.
    pub anneal_fraction: f64,
    pub target_sync: usize,
    /// Steps collected before the first update.
    pub learning_starts: usize,
    /// Environment steps per gradient update.
    pub train_every: usize,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            hidden: vec![64, 64],
            lr: 1e-3,
            gamma: 0.99,
            batch_size: 32,
            buffer: 10_000,
            eps_start: 1.0,
            eps_end: 0.05,
            anneal_fraction: 0.8,
            target_sync: 200,
            learning_starts: 500,
            train_every: 1,
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.gamma)
            && self.batch_size > 0
            && self.buffer >= self.batch_size
            && (0.0..=1.0).contains(&self.eps_start)
            && (0.0..=1.0).contains(&self.eps_end)
            && self.anneal_fraction > 0.0
            && self.target_sync > 0
            && self.train_every > 0
            && !self.hidden.contains(&0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid behavior configuration: {self:?}")))
        }
    }

    /// Epsilon at environment step `step` of a `total`-step run.
    pub fn epsilon(&self, step: usize, total: usize) -> f64 {
        let horizon = (self.anneal_fraction * total as f64).max(1.0);
        let frac = (step as f64 / horizon).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }

    pub fn describe(&self) -> String {
        format!(
            "hidden {:?}, eps {} -> {} over {}%, batch {}, buffer {}",
            self.hidden,
            self.eps_start,
            self.eps_end,
            self.anneal_fraction * 100.0,
            self.batch_size,
            self.buffer
        )
    }
}

/// Output of [`train_online_behavior`].
#[derive(Debug, Clone)]
pub struct BehaviorRun<S> {
    pub nets: Vec<NetParams<S>>,
    /// Chronological per-agent trace, one transition per environment step.
    pub trace: Vec<Vec<Transition>>,
    /// Undiscounted return of every completed episode.
    pub episode_returns: Vec<f64>,
}

/// Online independent DQN with epsilon-greedy exploration, a sliding
/// replay window and periodic target copies.
pub fn train_online_behavior<S: Scalar>(
    cfg: &EnvConfig,
    task: &TaskSpec,
    steps: usize,
    bcfg: &BehaviorConfig,
    seed: u64,
) -> Result<BehaviorRun<S>> {
    bcfg.validate()?;
    if steps == 0 {
        return Err(Error::Config("behavior run needs at least one step".into()));
    }
    let env = Env::new(cfg.clone(), *task)?;
    let (obs_dim, n_devices, n_actions) = (cfg.obs_dim(), cfg.n_devices, cfg.n_actions());
    let mut nets: Vec<NetParams<S>> = init_nets(cfg, &bcfg.hidden, rng::derive(seed, 0xbe));
    let mut targets = nets.clone();
    let mut opts: Vec<Optimizer<S>> = nets.iter().map(|n| Optimizer::new(OptimizerKind::Adam, n)).collect();
    let mut act_rng = rng::stream(seed, 2);
    let mut batch_rng = rng::stream(seed, 3);
    let gamma = S::of(bcfg.gamma);
    let lr = S::of(bcfg.lr);

    let mut trace: Vec<Vec<Transition>> = vec![Vec::with_capacity(steps); cfg.n_uavs];
    let mut episode_returns = Vec::new();
    let mut ret = 0.0;
    let mut state = env.reset();
    let mut episode = 0;
    let mut updates = 0usize;
    let mut obs = env.observe_all(&state);
    for step in 0..steps {
        let eps = bcfg.epsilon(step, steps);
        let mut ids = Vec::with_capacity(cfg.n_uavs);
        for (u, o) in obs.iter().enumerate() {
            let explore = act_rng.gen::<f64>() < eps;
            let id = if explore {
                act_rng.gen_range(0..n_actions)
            } else {
                let x: Vec<S> = o.iter().map(|&v| S::of(v)).collect();
                policies::greedy_q_id(&nets[u], &x)?
            };
            ids.push(id);
        }
        let actions = ids
            .iter()
            .map(|&id| AgentAction::decode(id, n_devices))
            .collect::<Result<Vec<_>>>()?;
        let (next, out) = env.step(&state, &actions)?;
        ret += out.reward;
        for (u, seq) in trace.iter_mut().enumerate() {
            seq.push(Transition {
                agent: u,
                episode,
                t: state.t,
                obs: obs[u].clone(),
                action: ids[u],
                reward: out.reward,
                next_obs: out.observations[u].clone(),
                done: out.done,
            });
        }
        if out.done {
            episode_returns.push(ret);
            ret = 0.0;
            episode += 1;
            state = env.reset();
            obs = env.observe_all(&state);
        } else {
            state = next;
            obs = out.observations;
        }

        let seen = step + 1;
        if seen >= bcfg.learning_starts.max(bcfg.batch_size) && seen % bcfg.train_every == 0 {
            let lo = seen.saturating_sub(bcfg.buffer);
            for u in 0..cfg.n_uavs {
                let picks: Vec<usize> = rand::seq::index::sample(&mut batch_rng, seen - lo, bcfg.batch_size)
                    .into_iter()
                    .map(|k| lo + k)
                    .collect();
                let batch = data::agent_batch::<S>(&trace[u], &picks, obs_dim, 1.0);
                let lg = losses::dqn_loss_independent(&nets[u], &targets[u], &batch, gamma)?;
                opts[u].apply(&mut nets[u], &lg.grads[0], lr)?;
            }
            updates += 1;
            if updates % bcfg.target_sync == 0 {
                targets.clone_from(&nets);
            }
        }
    }
    if !nets.iter().all(NetParams::is_finite) {
        return Err(Error::NonFinite("behavior network parameters"));
    }
    Ok(BehaviorRun {
        nets,
        trace,
        episode_returns,
    })
}
