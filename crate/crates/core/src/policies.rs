//! Baseline policies and the greedy-Q wrapper.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{AgentAction, Cell, Direction, Env, Observation};
use crate::error::{Error, Result};
use crate::qnet::NetParams;
use crate::rng::Rng;
use crate::scalar::{argmax, Scalar};

/// Uniform flat action id in `[0, n_actions)`.
pub fn random_walk_id(rng: &mut Rng, n_actions: usize) -> usize {
    rng.gen_range(0..n_actions)
}

/// Uniform action over all `5 D` combinations.
pub fn random_walk_action(rng: &mut Rng, n_devices: usize) -> AgentAction {
    let id = random_walk_id(rng, Direction::ALL.len() * n_devices);
    AgentAction {
        direction: Direction::ALL[id / n_devices],
        device: id % n_devices,
    }
}

/// Flat id of the largest Q-value; ties go to the lowest id.
pub fn greedy_q_id<S: Scalar>(net: &NetParams<S>, obs: &[S]) -> Result<usize> {
    Ok(argmax(&net.forward(obs)?))
}

pub fn greedy_q_action<S: Scalar>(net: &NetParams<S>, obs: &[S], n_devices: usize) -> Result<AgentAction> {
    AgentAction::decode(greedy_q_id(net, obs)?, n_devices)
}

/// Splits the devices into one group per UAV by vertical strips: devices
/// are ordered by column (then row, then index) and cut into contiguous
/// runs whose sizes differ by at most one. Groups are indexed left to
/// right.
pub fn partition_devices(devices: &[Cell], n_groups: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..devices.len()).collect();
    order.sort_by_key(|&d| (devices[d].x, devices[d].y, d));
    let (base, extra) = (devices.len() / n_groups, devices.len() % n_groups);
    let mut groups = Vec::with_capacity(n_groups);
    let mut it = order.into_iter();
    for g in 0..n_groups {
        let n = base + usize::from(g < extra);
        groups.push(it.by_ref().take(n).collect());
    }
    groups
}

/// Group served by each UAV. UAVs are matched to strips by the column of
/// their starting cell so that the leftmost UAV covers the leftmost strip.
fn agent_groups(env: &Env) -> Vec<Vec<usize>> {
    let n_uavs = env.config().n_uavs;
    let starts = env.reset().uav_pos;
    let mut by_column: Vec<usize> = (0..n_uavs).collect();
    by_column.sort_by_key(|&u| (starts[u].x, starts[u].y, u));
    let strips = partition_devices(env.devices(), n_uavs);
    let mut groups = vec![Vec::new(); n_uavs];
    for (strip, &u) in strips.into_iter().zip(&by_column) {
        groups[u] = strip;
    }
    groups
}

/// Nearest-neighbor visiting order over `group` starting at `from`; ties
/// go to the lowest device index.
pub fn nearest_neighbor_tour(devices: &[Cell], group: &[usize], from: Cell) -> Vec<usize> {
    let mut left = group.to_vec();
    left.sort_unstable();
    let mut tour = Vec::with_capacity(left.len());
    let mut at = from;
    while !left.is_empty() {
        let k = (0..left.len())
            .min_by_key(|&k| (devices[left[k]].dist2(at), left[k]))
            .expect("non-empty");
        let d = left.remove(k);
        at = devices[d];
        tour.push(d);
    }
    tour
}

/// One grid step from `from` towards `to`, x first.
fn step_towards(from: Cell, to: Cell) -> Direction {
    use std::cmp::Ordering::*;
    match (to.x.cmp(&from.x), to.y.cmp(&from.y)) {
        (Greater, _) => Direction::East,
        (Less, _) => Direction::West,
        (_, Greater) => Direction::North,
        (_, Less) => Direction::South,
        _ => Direction::Hover,
    }
}

/// Open-loop `T`-step action sequence of UAV `agent`: it cycles through a
/// nearest-neighbor tour of its strip, flying straight to each device and
/// hovering one step above it to collect a packet. A UAV without devices
/// hovers in place scheduling its nearest device.
pub fn deterministic_route(env: &Env, agent: usize) -> Result<Vec<AgentAction>> {
    let cfg = env.config();
    if agent >= cfg.n_uavs {
        return Err(Error::Usage(format!("agent {agent} out of range for {} UAVs", cfg.n_uavs)));
    }
    let devices = env.devices();
    let start = env.reset().uav_pos[agent];
    let group = &agent_groups(env)[agent];
    if group.is_empty() {
        let nearest = (0..devices.len())
            .min_by_key(|&d| (devices[d].dist2(start), d))
            .expect("at least one device");
        return Ok(vec![AgentAction::new(Direction::Hover, nearest); cfg.horizon]);
    }
    let tour = nearest_neighbor_tour(devices, group, start);
    let mut route = Vec::with_capacity(cfg.horizon);
    let mut at = start;
    let mut k = 0;
    while route.len() < cfg.horizon {
        let d = tour[k % tour.len()];
        let dir = step_towards(at, devices[d]);
        route.push(AgentAction::new(dir, d));
        if dir == Direction::Hover {
            k += 1;
        } else {
            at = dir.apply(at, cfg.grid_size);
        }
    }
    Ok(route)
}

/// Serializable description of a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Random,
    Deterministic,
    GreedyQ,
}

impl PolicyKind {
    pub fn tag(self) -> &'static str {
        match self {
            PolicyKind::Random => "rw",
            PolicyKind::Deterministic => "det",
            PolicyKind::GreedyQ => "greedy-q",
        }
    }
}

/// Decision rule of one UAV.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy<S> {
    Random,
    Route(Vec<AgentAction>),
    Greedy(NetParams<S>),
}

impl<S: Scalar> Policy<S> {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Random => PolicyKind::Random,
            Policy::Route(_) => PolicyKind::Deterministic,
            Policy::Greedy(_) => PolicyKind::GreedyQ,
        }
    }

    /// One policy per UAV of `env`.
    pub fn baseline_set(kind: PolicyKind, env: &Env) -> Result<Vec<Self>> {
        let n = env.config().n_uavs;
        match kind {
            PolicyKind::Random => Ok(vec![Policy::Random; n]),
            PolicyKind::Deterministic => (0..n).map(|u| deterministic_route(env, u).map(Policy::Route)).collect(),
            PolicyKind::GreedyQ => Err(Error::Usage("greedy policies need network weights".into())),
        }
    }

    pub fn greedy_set(nets: &[NetParams<S>]) -> Vec<Self> {
        nets.iter().cloned().map(Policy::Greedy).collect()
    }

    /// Checks that the policy fits `env`.
    pub fn check(&self, env: &Env) -> Result<()> {
        let cfg = env.config();
        match self {
            Policy::Random => Ok(()),
            Policy::Route(r) => {
                if r.len() != cfg.horizon {
                    return Err(Error::dim("route length", cfg.horizon, r.len()));
                }
                match r.iter().find(|a| a.device >= cfg.n_devices) {
                    Some(a) => Err(Error::Usage(format!("route schedules unknown device {}", a.device))),
                    None => Ok(()),
                }
            }
            Policy::Greedy(net) => {
                if net.in_dim() != cfg.obs_dim() {
                    return Err(Error::dim("policy network input", cfg.obs_dim(), net.in_dim()));
                }
                if net.out_dim() != cfg.n_actions() {
                    return Err(Error::dim("policy network output", cfg.n_actions(), net.out_dim()));
                }
                Ok(())
            }
        }
    }

    /// Flat action id at step `t`.
    pub fn act(&self, obs: &Observation, t: usize, n_devices: usize, rng: &mut Rng) -> Result<usize> {
        match self {
            Policy::Random => Ok(random_walk_id(rng, Direction::ALL.len() * n_devices)),
            Policy::Route(r) => r
                .get(t)
                .map(|a| a.encode(n_devices))
                .ok_or_else(|| Error::Usage(format!("route has no action for step {t}"))),
            Policy::Greedy(net) => {
                let x: Vec<S> = obs.iter().map(|&v| S::of(v)).collect();
                greedy_q_id(net, &x)
            }
        }
    }
}
