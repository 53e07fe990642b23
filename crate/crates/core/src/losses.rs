//! TD losses for offline multi-agent Q-learning.
//!
//! All four objectives share one kernel. For agents `u = 1..U` with online
//! networks `Q^u` and frozen targets `Q̂^u`, a sample's TD residual is
//!
//! ```text
//! e = r + gamma (1 - done) sum_u max_a' Q̂^u(o'^u, a') - sum_u Q^u(o^u, a^u)
//! ```
//!
//! The DQN loss is the batch mean of `e²`. The CQL loss halves it and adds
//! `alpha * mean sum_u [logsumexp_a Q^u(o^u, a) - Q^u(o^u, a^u)]`.
//! Independent learners run the kernel with `U = 1` per agent; the CTDE
//! objectives run it once over all agents, which is value decomposition
//! (the joint Q is the sum of the per-agent Qs).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qnet::NetParams;
use crate::scalar::{logsumexp, softmax_into, Scalar};

/// Aligned transition arrays of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBatch<S> {
    pub obs_dim: usize,
    /// `len x obs_dim`, row-major.
    pub obs: Vec<S>,
    pub actions: Vec<usize>,
    pub rewards: Vec<S>,
    pub next_obs: Vec<S>,
    pub dones: Vec<bool>,
}

impl<S: Scalar> AgentBatch<S> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.obs.len() != n * self.obs_dim {
            return Err(Error::dim("batch obs", n * self.obs_dim, self.obs.len()));
        }
        if self.next_obs.len() != n * self.obs_dim {
            return Err(Error::dim("batch next_obs", n * self.obs_dim, self.next_obs.len()));
        }
        if self.rewards.len() != n {
            return Err(Error::dim("batch rewards", n, self.rewards.len()));
        }
        if self.dones.len() != n {
            return Err(Error::dim("batch dones", n, self.dones.len()));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("batch rewards"));
        }
        Ok(())
    }
}

/// One minibatch; `agents[u]` holds agent `u`'s view of the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch<S> {
    pub agents: Vec<AgentBatch<S>>,
}

impl<S: Scalar> Minibatch<S> {
    pub fn len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }
}

/// Loss value with per-agent parameter gradients.
#[derive(Debug, Clone)]
pub struct LossGrad<S> {
    pub loss: S,
    /// Mean squared TD residual.
    pub td: S,
    /// Mean conservative penalty (before the `alpha` weight); zero for DQN.
    pub conservative: S,
    pub grads: Vec<NetParams<S>>,
}

/// Sum of per-agent Q-values.
pub fn vdn_global_q<S: Scalar>(per_agent_q: &[S]) -> S {
    per_agent_q.iter().fold(S::zero(), |acc, &q| acc + q)
}

/// `logsumexp(q) - q[action]`, the per-sample conservative penalty.
pub fn conservative_gap<S: Scalar>(q: &[S], action: usize) -> S {
    logsumexp(q) - q[action]
}

fn joint_loss<S: Scalar>(
    onlines: &[&NetParams<S>],
    targets: &[&NetParams<S>],
    batches: &[&AgentBatch<S>],
    gamma: S,
    alpha: Option<S>,
) -> Result<LossGrad<S>> {
    let n_agents = onlines.len();
    if n_agents == 0 {
        return Err(Error::Usage("loss needs at least one agent".into()));
    }
    if targets.len() != n_agents || batches.len() != n_agents {
        return Err(Error::dim("agents", n_agents, targets.len().min(batches.len())));
    }
    if !(gamma >= S::zero() && gamma < S::one()) {
        return Err(Error::Config(format!("discount must lie in [0, 1), got {gamma}")));
    }
    if let Some(a) = alpha {
        if !(a >= S::zero()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {a}")));
        }
    }
    for b in batches {
        b.validate()?;
    }
    let n = batches[0].len();
    if let Some(b) = batches.iter().find(|b| b.len() != n) {
        return Err(Error::dim("agent batch length", n, b.len()));
    }
    let n_actions = onlines[0].out_dim();
    for (u, b) in batches.iter().enumerate() {
        if let Some(&a) = b.actions.iter().find(|&&a| a >= onlines[u].out_dim()) {
            return Err(Error::Usage(format!("action {a} out of range for agent {u}")));
        }
    }

    // Bootstrapped target from the frozen networks.
    let mut bootstrap = vec![S::zero(); n];
    for (target, b) in targets.iter().zip(batches) {
        let q_next = target.forward_batch(&b.next_obs, n)?;
        let k = target.out_dim();
        for (s, acc) in bootstrap.iter_mut().enumerate() {
            let m = q_next[s * k..(s + 1) * k]
                .iter()
                .copied()
                .fold(S::neg_infinity(), S::max);
            *acc += m;
        }
    }
    let rewards = &batches[0].rewards;
    let dones = &batches[0].dones;

    let tapes = onlines
        .iter()
        .zip(batches)
        .map(|(q, b)| q.forward_train(&b.obs, n))
        .collect::<Result<Vec<_>>>()?;

    let nf = S::of(n as f64);
    let two = S::of(2.0);
    let half = S::of(0.5);
    let mut residual = vec![S::zero(); n];
    let mut td = S::zero();
    for s in 0..n {
        let not_done = if dones[s] { S::zero() } else { S::one() };
        let y = rewards[s] + gamma * not_done * bootstrap[s];
        let q_sum = tapes
            .iter()
            .zip(batches)
            .fold(S::zero(), |acc, (t, b)| {
                let k = t.output().len() / n;
                acc + t.output()[s * k + b.actions[s]]
            });
        residual[s] = y - q_sum;
        td += residual[s] * residual[s];
    }
    td /= nf;

    let mut conservative = S::zero();
    let mut grads = Vec::with_capacity(n_agents);
    let mut probs = vec![S::zero(); n_actions];
    for ((q, tape), b) in onlines.iter().zip(&tapes).zip(batches) {
        let k = q.out_dim();
        let out = tape.output();
        let mut d_out = vec![S::zero(); n * k];
        for s in 0..n {
            let a = b.actions[s];
            let c_td = -(two * residual[s]) / nf;
            let row = &mut d_out[s * k..(s + 1) * k];
            match alpha {
                None => row[a] = c_td,
                Some(alpha) => {
                    let qs = &out[s * k..(s + 1) * k];
                    conservative += conservative_gap(qs, a);
                    probs.resize(k, S::zero());
                    softmax_into(qs, &mut probs);
                    let w = alpha / nf;
                    for (j, d) in row.iter_mut().enumerate() {
                        let onehot = if j == a { S::one() } else { S::zero() };
                        let td_part = if j == a { half * c_td } else { S::zero() };
                        *d = td_part + w * (probs[j] - onehot);
                    }
                }
            }
        }
        grads.push(q.backward(tape, &d_out)?);
    }
    conservative /= nf;

    let loss = match alpha {
        None => td,
        Some(alpha) => half * td + alpha * conservative,
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(LossGrad {
        loss,
        td,
        conservative,
        grads,
    })
}

/// Independent DQN loss of one agent.
pub fn dqn_loss_independent<S: Scalar>(
    online: &NetParams<S>,
    target: &NetParams<S>,
    batch: &AgentBatch<S>,
    gamma: S,
) -> Result<LossGrad<S>> {
    joint_loss(&[online], &[target], &[batch], gamma, None)
}

/// Independent CQL loss of one agent.
pub fn cql_loss_independent<S: Scalar>(
    online: &NetParams<S>,
    target: &NetParams<S>,
    batch: &AgentBatch<S>,
    gamma: S,
    alpha: S,
) -> Result<LossGrad<S>> {
    joint_loss(&[online], &[target], &[batch], gamma, Some(alpha))
}

/// Joint DQN loss on the value-decomposed Q.
pub fn ctde_dqn_loss<S: Scalar>(
    onlines: &[NetParams<S>],
    targets: &[NetParams<S>],
    batch: &Minibatch<S>,
    gamma: S,
) -> Result<LossGrad<S>> {
    let (o, t, b) = refs(onlines, targets, batch);
    joint_loss(&o, &t, &b, gamma, None)
}

/// Joint CQL loss on the value-decomposed Q.
pub fn ctde_cql_loss<S: Scalar>(
    onlines: &[NetParams<S>],
    targets: &[NetParams<S>],
    batch: &Minibatch<S>,
    gamma: S,
    alpha: S,
) -> Result<LossGrad<S>> {
    let (o, t, b) = refs(onlines, targets, batch);
    joint_loss(&o, &t, &b, gamma, Some(alpha))
}

#[allow(clippy::type_complexity)]
fn refs<'a, S>(
    onlines: &'a [NetParams<S>],
    targets: &'a [NetParams<S>],
    batch: &'a Minibatch<S>,
) -> (Vec<&'a NetParams<S>>, Vec<&'a NetParams<S>>, Vec<&'a AgentBatch<S>>) {
    (
        onlines.iter().collect(),
        targets.iter().collect(),
        batch.agents.iter().collect(),
    )
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "i-dqn")]
    IndependentDqn,
    #[serde(rename = "i-cql")]
    IndependentCql,
    #[serde(rename = "ctde-dqn")]
    CtdeDqn,
    #[serde(rename = "ctde-cql")]
    CtdeCql,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::IndependentDqn,
        Objective::CtdeDqn,
        Objective::IndependentCql,
        Objective::CtdeCql,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Objective::IndependentDqn => "i-dqn",
            Objective::IndependentCql => "i-cql",
            Objective::CtdeDqn => "ctde-dqn",
            Objective::CtdeCql => "ctde-cql",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.tag() == tag)
    }

    pub fn is_ctde(self) -> bool {
        matches!(self, Objective::CtdeDqn | Objective::CtdeCql)
    }

    pub fn is_conservative(self) -> bool {
        matches!(self, Objective::IndependentCql | Objective::CtdeCql)
    }

    /// Evaluates the objective for all agents. Independent objectives
    /// return the sum of the per-agent losses, whose gradient with respect
    /// to agent `u`'s parameters is agent `u`'s own gradient.
    pub fn evaluate<S: Scalar>(
        self,
        onlines: &[NetParams<S>],
        targets: &[NetParams<S>],
        batch: &Minibatch<S>,
        gamma: S,
        alpha: S,
    ) -> Result<LossGrad<S>> {
        if onlines.len() != batch.n_agents() {
            return Err(Error::dim("agents in batch", onlines.len(), batch.n_agents()));
        }
        let alpha = self.is_conservative().then_some(alpha);
        if self.is_ctde() {
            let (o, t, b) = refs(onlines, targets, batch);
            return joint_loss(&o, &t, &b, gamma, alpha);
        }
        let mut total = LossGrad {
            loss: S::zero(),
            td: S::zero(),
            conservative: S::zero(),
            grads: Vec::with_capacity(onlines.len()),
        };
        for ((q, t), b) in onlines.iter().zip(targets).zip(&batch.agents) {
            let mut lg = joint_loss(&[q], &[t], &[b], gamma, alpha)?;
            total.loss += lg.loss;
            total.td += lg.td;
            total.conservative += lg.conservative;
            total.grads.push(lg.grads.pop().expect("one agent"));
        }
        Ok(total)
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}
