//! Episodic gridworld of ground IoT devices served by hovering UAVs.
//!
//! Devices sit at the centers of distinct cells of an `L x L` grid. Each step
//! every UAV either moves one cell (east/west/north/south, clamped at the
//! border) or hovers and schedules one device for an uplink packet. A device
//! that transmits has its age of information reset to 1 and pays the LoS
//! transmit power needed to reach the receiving UAV; every other device ages
//! by one step. All agents share one cooperative reward:
//!
//! ```text
//! r_t = -sum_d delta_d * A_d(t) - lambda * sum_{d served} P_d(t)
//! ```

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Converts a power ratio in dB to linear scale.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Converts dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

/// Grid and radio parameters of the network.
/// Missing fields in serialized form take their [`EnvConfig::full_size`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Grid side in cells.
    pub grid_size: usize,
    /// Distance between adjacent cell centers, meters.
    pub cell_size: f64,
    pub n_devices: usize,
    pub n_uavs: usize,
    /// UAV flight altitude, meters.
    pub altitude: f64,
    /// Channel gain at 1 m reference distance, linear.
    pub g0: f64,
    /// Receiver noise power, watts.
    pub noise_power: f64,
    /// Uplink packet size, bits.
    pub packet_bits: f64,
    /// Bandwidth, Hz.
    pub bandwidth: f64,
    /// Episode length in steps.
    pub horizon: usize,
    /// Per-device importance weights; `None` means uniform `1/D`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    /// Maximum planar UAV-device distance (meters) at which a packet can be
    /// received. `None` leaves service range unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_radius: Option<f64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::full_size()
    }
}

impl EnvConfig {
    /// 11 x 11 grid of 100 m cells, 10 devices, 2 UAVs, T = 100.
    pub fn full_size() -> Self {
        EnvConfig {
            grid_size: 11,
            cell_size: 100.0,
            n_devices: 10,
            n_uavs: 2,
            altitude: 100.0,
            g0: db_to_linear(30.0),
            noise_power: dbm_to_watts(-100.0),
            packet_bits: 5e6,
            bandwidth: 1e6,
            horizon: 100,
            delta: None,
            service_radius: None,
        }
    }

    /// Reduced 5 x 5 grid with 4 devices, 2 UAVs and T = 50.
    pub fn desk() -> Self {
        EnvConfig {
            grid_size: 5,
            n_devices: 4,
            horizon: 50,
            ..Self::full_size()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.grid_size < 2 {
            return bad("grid_size must be at least 2");
        }
        if self.n_devices == 0 {
            return bad("n_devices must be at least 1");
        }
        if self.n_uavs == 0 {
            return bad("n_uavs must be at least 1");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.n_devices > self.grid_size * self.grid_size {
            return Err(Error::Config(format!(
                "{} devices do not fit on a {}x{} grid",
                self.n_devices, self.grid_size, self.grid_size
            )));
        }
        let physical = [
            ("cell_size", self.cell_size),
            ("altitude", self.altitude),
            ("g0", self.g0),
            ("noise_power", self.noise_power),
            ("bandwidth", self.bandwidth),
        ];
        for (name, v) in physical {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.packet_bits.is_finite() && self.packet_bits >= 0.0) {
            return bad("packet_bits must be non-negative");
        }
        if let Some(delta) = &self.delta {
            if delta.len() != self.n_devices {
                return Err(Error::dim("delta", self.n_devices, delta.len()));
            }
            if delta.iter().any(|&w| !(w.is_finite() && w > 0.0)) {
                return bad("delta weights must be positive");
            }
        }
        if let Some(r) = self.service_radius {
            if !(r >= 0.0) {
                return bad("service_radius must be non-negative");
            }
        }
        Ok(())
    }

    /// Resolved importance weights.
    pub fn weights(&self) -> Vec<f64> {
        match &self.delta {
            Some(d) => d.clone(),
            None => vec![1.0 / self.n_devices as f64; self.n_devices],
        }
    }

    /// Observation length `2 + D`.
    pub fn obs_dim(&self) -> usize {
        2 + self.n_devices
    }

    /// Number of flat actions `5 D`.
    pub fn n_actions(&self) -> usize {
        Direction::ALL.len() * self.n_devices
    }

    /// `(2^(M/B) - 1) sigma^2 / g0`, the power per unit of squared distance.
    pub fn power_coefficient(&self) -> f64 {
        ((self.packet_bits / self.bandwidth).exp2() - 1.0) * self.noise_power / self.g0
    }

    fn contains(&self, c: Cell) -> bool {
        c.x < self.grid_size && c.y < self.grid_size
    }
}

/// One task of the task distribution: a reward trade-off and a device layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// AoI / transmit power trade-off weight.
    pub lambda: f64,
    /// Seed of the device placement.
    pub layout_seed: u64,
}

impl TaskSpec {
    pub fn new(lambda: f64, layout_seed: u64) -> Self {
        TaskSpec {
            lambda,
            layout_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Grid cell; `x` grows eastwards, `y` northwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }

    /// Squared planar distance between cell centers, in cells².
    pub fn dist2(self, other: Cell) -> usize {
        let dx = self.x.abs_diff(other.x);
        let dy = self.y.abs_diff(other.y);
        dx * dx + dy * dy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    East,
    West,
    North,
    South,
    Hover,
}

impl Direction {
    pub const ALL: [Direction; 5] = [
        Direction::East,
        Direction::West,
        Direction::North,
        Direction::South,
        Direction::Hover,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Moves `from` one cell, staying in place when the move would leave
    /// the grid.
    pub fn apply(self, from: Cell, grid_size: usize) -> Cell {
        let Cell { x, y } = from;
        match self {
            Direction::East if x + 1 < grid_size => Cell::new(x + 1, y),
            Direction::West if x > 0 => Cell::new(x - 1, y),
            Direction::North if y + 1 < grid_size => Cell::new(x, y + 1),
            Direction::South if y > 0 => Cell::new(x, y - 1),
            _ => from,
        }
    }
}

/// Movement plus scheduled device for a single UAV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentAction {
    pub direction: Direction,
    pub device: usize,
}

impl AgentAction {
    pub fn new(direction: Direction, device: usize) -> Self {
        AgentAction { direction, device }
    }

    /// Flat id `direction_index * D + device`.
    pub fn encode(self, n_devices: usize) -> usize {
        self.direction.index() * n_devices + self.device
    }

    pub fn decode(id: usize, n_devices: usize) -> Result<Self> {
        if n_devices == 0 || id >= Direction::ALL.len() * n_devices {
            return Err(Error::Usage(format!(
                "action id {id} out of range for {n_devices} devices"
            )));
        }
        Ok(AgentAction {
            direction: Direction::ALL[id / n_devices],
            device: id % n_devices,
        })
    }
}

/// Dynamic part of the environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub uav_pos: Vec<Cell>,
    pub aoi: Vec<u32>,
    pub t: usize,
}

/// Per-agent feature vector: own position over `L - 1`, then each AoI over
/// `T` clipped at 1.
pub type Observation = Vec<f64>;

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observations: Vec<Observation>,
    pub reward: f64,
    /// `served[d]` is true when device `d` delivered a packet this step.
    pub served: Vec<bool>,
    /// Receiving UAV of each served device.
    pub receiver: Vec<Option<usize>>,
    /// Total transmit power of this step, watts.
    pub power: f64,
    /// `sum_d delta_d A_d(t)` after the AoI update.
    pub aoi_term: f64,
    pub done: bool,
}

/// Channel gain `g0 / (h^2 + r^2)` between a device and a UAV cell.
pub fn channel_gain(cfg: &EnvConfig, device: Cell, uav: Cell) -> f64 {
    let r2 = device.dist2(uav) as f64 * cfg.cell_size * cfg.cell_size;
    cfg.g0 / (cfg.altitude * cfg.altitude + r2)
}

/// Transmit power (watts) for `device` to deliver one packet to a UAV above
/// `uav`.
pub fn transmit_power(cfg: &EnvConfig, device: Cell, uav: Cell) -> f64 {
    let r2 = device.dist2(uav) as f64 * cfg.cell_size * cfg.cell_size;
    cfg.power_coefficient() * (cfg.altitude * cfg.altitude + r2)
}

/// Age of information after one step.
pub fn aoi_update(aoi: u32, served: bool) -> u32 {
    if served {
        1
    } else {
        aoi + 1
    }
}

/// Starting cell of UAV `u`: corners taken round-robin, first the two
/// opposite corners.
pub fn start_cell(u: usize, grid_size: usize) -> Cell {
    let m = grid_size - 1;
    match u % 4 {
        0 => Cell::new(0, 0),
        1 => Cell::new(m, m),
        2 => Cell::new(m, 0),
        _ => Cell::new(0, m),
    }
}

/// Environment instance for one (configuration, task) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    cfg: EnvConfig,
    task: TaskSpec,
    devices: Vec<Cell>,
    weights: Vec<f64>,
}

impl Env {
    /// Validates the configuration and places devices from the task's
    /// layout seed.
    pub fn new(cfg: EnvConfig, task: TaskSpec) -> Result<Self> {
        cfg.validate()?;
        task.validate()?;
        let n_cells = cfg.grid_size * cfg.grid_size;
        let mut rng = ChaCha8Rng::seed_from_u64(task.layout_seed);
        let devices = index::sample(&mut rng, n_cells, cfg.n_devices)
            .into_iter()
            .map(|i| Cell::new(i % cfg.grid_size, i / cfg.grid_size))
            .collect();
        let weights = cfg.weights();
        Ok(Env {
            cfg,
            task,
            devices,
            weights,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn devices(&self) -> &[Cell] {
        &self.devices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn reset(&self) -> EnvState {
        EnvState {
            uav_pos: (0..self.cfg.n_uavs)
                .map(|u| start_cell(u, self.cfg.grid_size))
                .collect(),
            aoi: vec![1; self.cfg.n_devices],
            t: 0,
        }
    }

    pub fn step(&self, state: &EnvState, actions: &[AgentAction]) -> Result<(EnvState, StepOutcome)> {
        let cfg = &self.cfg;
        if state.t >= cfg.horizon {
            return Err(Error::Usage(format!(
                "step called on a finished episode (t = {})",
                state.t
            )));
        }
        if actions.len() != cfg.n_uavs {
            return Err(Error::dim("step actions", cfg.n_uavs, actions.len()));
        }
        if let Some(a) = actions.iter().find(|a| a.device >= cfg.n_devices) {
            return Err(Error::Usage(format!(
                "scheduled device {} out of range",
                a.device
            )));
        }

        let uav_pos: Vec<Cell> = state
            .uav_pos
            .iter()
            .zip(actions)
            .map(|(&p, a)| a.direction.apply(p, cfg.grid_size))
            .collect();

        let max_r2 = cfg
            .service_radius
            .map(|r| (r / cfg.cell_size) * (r / cfg.cell_size));
        let mut receiver: Vec<Option<usize>> = vec![None; cfg.n_devices];
        for (u, a) in actions.iter().enumerate() {
            if a.direction != Direction::Hover {
                continue;
            }
            let d = a.device;
            let r2 = self.devices[d].dist2(uav_pos[u]);
            if max_r2.is_some_and(|m| r2 as f64 > m) {
                continue;
            }
            // Nearest hovering scheduler wins; iteration order keeps the
            // lowest index on ties.
            match receiver[d] {
                Some(v) if self.devices[d].dist2(uav_pos[v]) <= r2 => {}
                _ => receiver[d] = Some(u),
            }
        }

        let mut power = 0.0;
        let mut aoi = Vec::with_capacity(cfg.n_devices);
        let mut served = Vec::with_capacity(cfg.n_devices);
        for (d, rx) in receiver.iter().enumerate() {
            if let Some(u) = *rx {
                power += transmit_power(cfg, self.devices[d], uav_pos[u]);
            }
            served.push(rx.is_some());
            aoi.push(aoi_update(state.aoi[d], rx.is_some()));
        }
        let aoi_term: f64 = aoi
            .iter()
            .zip(&self.weights)
            .map(|(&a, &w)| w * a as f64)
            .sum();
        let reward = -aoi_term - self.task.lambda * power;

        let next = EnvState {
            uav_pos,
            aoi,
            t: state.t + 1,
        };
        let observations = (0..cfg.n_uavs).map(|u| self.observe(&next, u)).collect();
        let done = next.t == cfg.horizon;
        Ok((
            next,
            StepOutcome {
                observations,
                reward,
                served,
                receiver,
                power,
                aoi_term,
                done,
            },
        ))
    }

    /// Normalized view of UAV `agent`.
    pub fn observe(&self, state: &EnvState, agent: usize) -> Observation {
        let scale = (self.cfg.grid_size - 1) as f64;
        let horizon = self.cfg.horizon as f64;
        let p = state.uav_pos[agent];
        let mut obs = Vec::with_capacity(self.cfg.obs_dim());
        obs.push(p.x as f64 / scale);
        obs.push(p.y as f64 / scale);
        obs.extend(state.aoi.iter().map(|&a| (a as f64 / horizon).min(1.0)));
        obs
    }

    pub fn observe_all(&self, state: &EnvState) -> Vec<Observation> {
        (0..self.cfg.n_uavs).map(|u| self.observe(state, u)).collect()
    }

    /// Full system state `(x_1, y_1, ..., x_U, y_U, A_1, ..., A_D)` in the
    /// same normalization as observations.
    pub fn global_state(&self, state: &EnvState) -> Vec<f64> {
        let scale = (self.cfg.grid_size - 1) as f64;
        let horizon = self.cfg.horizon as f64;
        let mut s = Vec::with_capacity(2 * self.cfg.n_uavs + self.cfg.n_devices);
        for p in &state.uav_pos {
            s.push(p.x as f64 / scale);
            s.push(p.y as f64 / scale);
        }
        s.extend(state.aoi.iter().map(|&a| (a as f64 / horizon).min(1.0)));
        s
    }

    /// Rebuilds the state behind a set of per-agent observations taken at
    /// step `t`. Exact as long as every AoI is below the horizon, which
    /// holds for all pre-step observations of an episode.
    pub fn state_from_observations(&self, obs: &[Observation], t: usize) -> Result<EnvState> {
        let cfg = &self.cfg;
        if obs.len() != cfg.n_uavs {
            return Err(Error::dim("observations", cfg.n_uavs, obs.len()));
        }
        let scale = (cfg.grid_size - 1) as f64;
        let mut uav_pos = Vec::with_capacity(cfg.n_uavs);
        for o in obs {
            if o.len() != cfg.obs_dim() {
                return Err(Error::dim("observation", cfg.obs_dim(), o.len()));
            }
            let cell = Cell::new((o[0] * scale).round() as usize, (o[1] * scale).round() as usize);
            if !cfg.contains(cell) {
                return Err(Error::Usage(format!("observation places a UAV off-grid: {cell:?}")));
            }
            uav_pos.push(cell);
        }
        let aoi = obs[0][2..]
            .iter()
            .map(|&f| ((f * cfg.horizon as f64).round() as u32).max(1))
            .collect();
        Ok(EnvState { uav_pos, aoi, t })
    }
}
