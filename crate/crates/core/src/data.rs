//! Offline datasets: collection from an online behavior learner, on-disk
//! format, support/query splitting and minibatch sampling.
//!
//! A dataset directory holds two files:
//!
//! * `meta.json` holds [`DatasetMeta`]: environment, task, behavior descriptor,
//!   seed and per-agent size.
//! * `transitions.txt` holds a version line `# aoi-marl-dataset v1` followed by
//!   one tab-separated record per transition:
//!   `agent episode t obs action reward next_obs done`, where `obs` and
//!   `next_obs` are comma-separated and `done` is `0`/`1`. Reals use the
//!   shortest decimal form that parses back to the identical bits.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{AgentAction, Env, EnvConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::losses::{AgentBatch, Minibatch};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::trainers::{train_online_behavior, BehaviorConfig};

pub const FORMAT_VERSION: &str = "v1";
const HEADER: &str = "# aoi-marl-dataset v1";
pub const META_FILE: &str = "meta.json";
pub const TRANSITIONS_FILE: &str = "transitions.txt";

/// Fraction of the online trace kept as the offline dataset.
pub const RETAINED_FRACTION: usize = 10;

/// One experience tuple of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub agent: usize,
    pub episode: usize,
    pub t: usize,
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: String,
    pub env: EnvConfig,
    pub task: TaskSpec,
    /// Free-form description of the policy that produced the data.
    pub behavior: String,
    pub seed: u64,
    /// Transitions per agent.
    pub size: usize,
}

/// Per-agent transition sequences, aligned by index: entry `i` of every
/// agent comes from the same environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub meta: DatasetMeta,
    pub agents: Vec<Vec<Transition>>,
}

impl DatasetBundle {
    pub fn new(meta: DatasetMeta, agents: Vec<Vec<Transition>>) -> Result<Self> {
        let b = DatasetBundle { meta, agents };
        b.validate()?;
        Ok(b)
    }

    /// Transitions per agent.
    pub fn len(&self) -> usize {
        self.agents.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn task(&self) -> &TaskSpec {
        &self.meta.task
    }

    pub fn env(&self) -> Result<Env> {
        Env::new(self.meta.env.clone(), self.meta.task)
    }

    /// Checks dimensions, per-agent alignment and the shared reward.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.meta.env;
        cfg.validate()?;
        self.meta.task.validate()?;
        if self.agents.len() != cfg.n_uavs {
            return Err(Error::dim("dataset agents", cfg.n_uavs, self.agents.len()));
        }
        let n = self.len();
        if n != self.meta.size {
            return Err(Error::dim("dataset size", self.meta.size, n));
        }
        let (obs_dim, n_actions) = (cfg.obs_dim(), cfg.n_actions());
        for (u, seq) in self.agents.iter().enumerate() {
            if seq.len() != n {
                return Err(Error::dim("agent transitions", n, seq.len()));
            }
            for (i, tr) in seq.iter().enumerate() {
                if tr.agent != u {
                    return Err(Error::Usage(format!(
                        "transition {i} of agent {u} is labelled agent {}",
                        tr.agent
                    )));
                }
                if tr.obs.len() != obs_dim || tr.next_obs.len() != obs_dim {
                    return Err(Error::dim("transition observation", obs_dim, tr.obs.len()));
                }
                if tr.action >= n_actions {
                    return Err(Error::Usage(format!("transition {i}: action {} out of range", tr.action)));
                }
                if !tr.reward.is_finite() {
                    return Err(Error::NonFinite("transition reward"));
                }
                let lead = &self.agents[0][i];
                if (tr.episode, tr.t) != (lead.episode, lead.t) || tr.reward.to_bits() != lead.reward.to_bits() {
                    return Err(Error::Usage(format!(
                        "transition {i} of agent {u} is not aligned with agent 0"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Enforces `|B^u| <= capacity`.
    pub fn check_capacity(&self, capacity: usize) -> Result<()> {
        if self.len() > capacity {
            return Err(Error::Config(format!(
                "dataset holds {} transitions per agent, above the capacity of {capacity}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Refuses a dataset collected for a different task.
    pub fn check_task(&self, task: &TaskSpec) -> Result<()> {
        let have = &self.meta.task;
        if have.lambda.to_bits() != task.lambda.to_bits() {
            return Err(Error::TaskMismatch(format!(
                "dataset was collected with lambda = {}, requested lambda = {}",
                have.lambda, task.lambda
            )));
        }
        if have.layout_seed != task.layout_seed {
            return Err(Error::TaskMismatch(format!(
                "dataset was collected with layout seed {}, requested {}",
                have.layout_seed, task.layout_seed
            )));
        }
        Ok(())
    }

    /// Keeps the aligned entries at `indices` (in the given order).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Usage(format!("index {i} outside dataset of {}", self.len())));
        }
        let agents = self
            .agents
            .iter()
            .map(|seq| indices.iter().map(|&i| seq[i].clone()).collect())
            .collect();
        let meta = DatasetMeta {
            size: indices.len(),
            ..self.meta.clone()
        };
        Ok(DatasetBundle { meta, agents })
    }

    /// Uniform random subset of `n` aligned entries, kept in chronological
    /// order.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Usage(format!(
                "cannot subsample {n} of {} transitions",
                self.len()
            )));
        }
        let mut rng = rng::seeded(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }

    /// Writes `meta.json` and `transitions.txt` into `dir`, creating it.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;

        let path = dir.join(TRANSITIONS_FILE);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        let mut line = String::new();
        let res: std::io::Result<()> = (|| {
            writeln!(w, "{HEADER}")?;
            for seq in &self.agents {
                for tr in seq {
                    line.clear();
                    format_record(&mut line, tr);
                    w.write_all(line.as_bytes())?;
                }
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(&path, e))
    }

    /// Reads a dataset directory written by [`DatasetBundle::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: meta_path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if meta.version != FORMAT_VERSION {
            return Err(Error::Version {
                path: meta_path,
                found: meta.version,
                expected: FORMAT_VERSION.into(),
            });
        }

        let path = dir.join(TRANSITIONS_FILE);
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header = match lines.next() {
            Some(Ok(h)) => h,
            Some(Err(e)) => return Err(Error::io(&path, e)),
            None => {
                return Err(Error::Parse {
                    path,
                    line: 1,
                    msg: "empty file".into(),
                })
            }
        };
        if header != HEADER {
            return Err(Error::Version {
                path,
                found: header,
                expected: HEADER.into(),
            });
        }
        let n_agents = meta.env.n_uavs;
        let obs_dim = meta.env.obs_dim();
        let mut agents: Vec<Vec<Transition>> = vec![Vec::with_capacity(meta.size); n_agents];
        let mut last_line = 1;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            last_line = lineno;
            let line = line.map_err(|e| Error::io(&path, e))?;
            let tr = parse_record(&line, obs_dim).map_err(|msg| Error::Parse {
                path: path.clone(),
                line: lineno,
                msg,
            })?;
            if tr.agent >= n_agents {
                return Err(Error::Parse {
                    path: path.clone(),
                    line: lineno,
                    msg: format!("agent {} out of range", tr.agent),
                });
            }
            agents[tr.agent].push(tr);
        }
        if let Some((u, seq)) = agents.iter().enumerate().find(|(_, s)| s.len() != meta.size) {
            return Err(Error::Parse {
                path,
                line: last_line,
                msg: format!(
                    "agent {u} has {} records, metadata promises {} (truncated file?)",
                    seq.len(),
                    meta.size
                ),
            });
        }
        DatasetBundle::new(meta, agents)
    }

    /// Loads a dataset and refuses it unless it was collected for `task`.
    pub fn load_for_task(dir: impl AsRef<Path>, task: &TaskSpec) -> Result<Self> {
        let b = Self::load(dir)?;
        b.check_task(task)?;
        Ok(b)
    }
}

fn push_list(out: &mut String, xs: &[f64]) {
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{x}").expect("string write");
    }
}

fn format_record(out: &mut String, tr: &Transition) {
    write!(out, "{}\t{}\t{}\t", tr.agent, tr.episode, tr.t).expect("string write");
    push_list(out, &tr.obs);
    write!(out, "\t{}\t{}\t", tr.action, tr.reward).expect("string write");
    push_list(out, &tr.next_obs);
    writeln!(out, "\t{}", u8::from(tr.done)).expect("string write");
}

fn parse_record(line: &str, obs_dim: usize) -> std::result::Result<Transition, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 8 {
        return Err(format!("expected 8 tab-separated fields, found {}", fields.len()));
    }
    fn int(s: &str, what: &str) -> std::result::Result<usize, String> {
        s.parse().map_err(|_| format!("bad {what} `{s}`"))
    }
    let list = |s: &str, what: &str| -> std::result::Result<Vec<f64>, String> {
        let v: Vec<f64> = s
            .split(',')
            .map(|t| t.parse::<f64>().map_err(|_| format!("bad {what} entry `{t}`")))
            .collect::<std::result::Result<_, _>>()?;
        if v.len() != obs_dim {
            return Err(format!("{what} has {} entries, expected {obs_dim}", v.len()));
        }
        Ok(v)
    };
    let done = match fields[7] {
        "0" => false,
        "1" => true,
        other => return Err(format!("bad done flag `{other}`")),
    };
    Ok(Transition {
        agent: int(fields[0], "agent")?,
        episode: int(fields[1], "episode")?,
        t: int(fields[2], "t")?,
        obs: list(fields[3], "obs")?,
        action: int(fields[4], "action")?,
        reward: fields[5].parse().map_err(|_| format!("bad reward `{}`", fields[5]))?,
        next_obs: list(fields[6], "next_obs")?,
        done,
    })
}

/// Trains an online behavior learner for `total_online_steps` environment
/// steps and keeps the last tenth of its experience.
pub fn generate_offline_dataset<S: Scalar>(
    cfg: &EnvConfig,
    task: &TaskSpec,
    total_online_steps: usize,
    behavior: &BehaviorConfig,
    seed: u64,
) -> Result<DatasetBundle> {
    let size = total_online_steps / RETAINED_FRACTION;
    if size == 0 {
        return Err(Error::Config(format!(
            "{total_online_steps} online steps are too few to retain any data"
        )));
    }
    let run = train_online_behavior::<S>(cfg, task, total_online_steps, behavior, seed)?;
    let agents = run
        .trace
        .into_iter()
        .map(|seq| seq[seq.len() - size..].to_vec())
        .collect();
    let meta = DatasetMeta {
        version: FORMAT_VERSION.into(),
        env: cfg.clone(),
        task: *task,
        behavior: format!(
            "online independent DQN, last {size} of {total_online_steps} steps ({})",
            behavior.describe()
        ),
        seed,
        size,
    };
    DatasetBundle::new(meta, agents)
}

/// Replays every stored step through the environment and compares rewards
/// and next observations bit for bit. Returns the number of steps checked.
pub fn verify_replay(bundle: &DatasetBundle) -> Result<usize> {
    let env = bundle.env()?;
    let d = bundle.meta.env.n_devices;
    for i in 0..bundle.len() {
        let obs: Vec<Vec<f64>> = bundle.agents.iter().map(|s| s[i].obs.clone()).collect();
        let t = bundle.agents[0][i].t;
        let state = env.state_from_observations(&obs, t)?;
        let actions = bundle
            .agents
            .iter()
            .map(|s| AgentAction::decode(s[i].action, d))
            .collect::<Result<Vec<_>>>()?;
        let (_, out) = env.step(&state, &actions)?;
        for (u, seq) in bundle.agents.iter().enumerate() {
            let tr = &seq[i];
            let same_next = tr.next_obs.len() == out.observations[u].len()
                && tr
                    .next_obs
                    .iter()
                    .zip(&out.observations[u])
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if tr.reward.to_bits() != out.reward.to_bits() || !same_next || tr.done != out.done {
                return Err(Error::Usage(format!(
                    "transition {i} of agent {u} does not replay (stored reward {}, replayed {})",
                    tr.reward, out.reward
                )));
            }
        }
    }
    Ok(bundle.len())
}

/// Disjoint support and query index sets over a bundle; the same indices
/// apply to every agent so the shared reward stays aligned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportQuerySplit {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    /// Fraction of entries in the support set, in per-mille.
    pub ratio_permille: u32,
}

/// Uniform random split with `ratio` of the entries in the support set.
pub fn split_support_query(bundle: &DatasetBundle, ratio: f64, seed: u64) -> Result<SupportQuerySplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n = bundle.len();
    let n_support = (n as f64 * ratio).round() as usize;
    if n_support == 0 || n_support == n {
        return Err(Error::Usage(format!(
            "a dataset of {n} transitions is too small to split at ratio {ratio}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let query = idx.split_off(n_support);
    let mut support = idx;
    support.sort_unstable();
    let mut query = query;
    query.sort_unstable();
    Ok(SupportQuerySplit {
        support,
        query,
        ratio_permille: (ratio * 1000.0).round() as u32,
    })
}

/// Builds one agent's batch from the transitions at `indices`, scaling
/// rewards by `reward_scale`.
pub fn agent_batch<S: Scalar>(
    seq: &[Transition],
    indices: &[usize],
    obs_dim: usize,
    reward_scale: f64,
) -> AgentBatch<S> {
    let mut b = AgentBatch {
        obs_dim,
        obs: Vec::with_capacity(indices.len() * obs_dim),
        actions: Vec::with_capacity(indices.len()),
        rewards: Vec::with_capacity(indices.len()),
        next_obs: Vec::with_capacity(indices.len() * obs_dim),
        dones: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        let tr = &seq[i];
        b.obs.extend(tr.obs.iter().map(|&x| S::of(x)));
        b.next_obs.extend(tr.next_obs.iter().map(|&x| S::of(x)));
        b.actions.push(tr.action);
        b.rewards.push(S::of(tr.reward * reward_scale));
        b.dones.push(tr.done);
    }
    b
}

/// Gathers the aligned entries at `indices` of every agent.
pub fn gather<S: Scalar>(bundle: &DatasetBundle, indices: &[usize], reward_scale: f64) -> Minibatch<S> {
    let obs_dim = bundle.meta.env.obs_dim();
    Minibatch {
        agents: bundle
            .agents
            .iter()
            .map(|seq| agent_batch(seq, indices, obs_dim, reward_scale))
            .collect(),
    }
}

/// Draws `batch_size` distinct entries of `part` uniformly.
pub fn sample_minibatch<S: Scalar>(
    bundle: &DatasetBundle,
    part: &[usize],
    batch_size: usize,
    reward_scale: f64,
    rng: &mut Rng,
) -> Result<Minibatch<S>> {
    if batch_size == 0 || batch_size > part.len() {
        return Err(Error::Usage(format!(
            "requested a batch of {batch_size} from {} transitions",
            part.len()
        )));
    }
    let picks: Vec<usize> = rand::seq::index::sample(rng, part.len(), batch_size)
        .into_iter()
        .map(|k| part[k])
        .collect();
    Ok(gather(bundle, &picks, reward_scale))
}

/// Shuffles `part` and cuts it into consecutive batches; the last batch
/// may be short.
pub fn epoch_batches(part: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx = part.to_vec();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
