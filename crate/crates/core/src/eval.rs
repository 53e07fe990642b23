//! Episode rollouts, metric aggregation and metric files.
//!
//! Every record reports time averages over full episodes: `reward` is the
//! mean per-step reward, `aoi` the mean of `A_d(t)` over steps and devices,
//! `aoi_term` the mean of `sum_d delta_d A_d(t)` and `power` the mean total
//! transmit power per step in watts. For every record
//! `reward = -aoi_term - lambda * power` up to rounding.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{AgentAction, Env};
use crate::error::{Error, Result};
use crate::policies::{Policy, PolicyKind};
use crate::qnet::NetParams;
use crate::rng;
use crate::scalar::Scalar;

/// Column order of metric files.
pub const COLUMNS: [&str; 9] = ["index", "reward", "aoi", "aoi_term", "power", "loss", "lambda", "seed", "algo"];

/// Metrics of one episode, or of one training epoch averaged over its
/// evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Episode or epoch index.
    pub index: usize,
    pub reward: f64,
    pub aoi: f64,
    pub aoi_term: f64,
    /// Watts per step.
    pub power: f64,
    /// Mean training loss of the epoch, when the record comes from training.
    pub loss: Option<f64>,
    pub lambda: f64,
    pub seed: u64,
    pub algo: String,
}

impl MetricsRecord {
    /// Power in picowatts, for display.
    pub fn power_pw(&self) -> f64 {
        self.power * 1e12
    }
}

/// Runs `episodes` full episodes, one record per episode. Episode `i` draws
/// its randomness from its own stream of `seed`, so records do not depend
/// on execution order.
pub fn rollout<S: Scalar>(
    env: &Env,
    policies: &[Policy<S>],
    episodes: usize,
    seed: u64,
    algo: &str,
) -> Result<Vec<MetricsRecord>> {
    let cfg = env.config();
    if policies.len() != cfg.n_uavs {
        return Err(Error::dim("policies", cfg.n_uavs, policies.len()));
    }
    for p in policies {
        p.check(env)?;
    }
    (0..episodes)
        .map(|ep| run_episode(env, policies, ep, seed, algo))
        .collect()
}

/// Runs episode `ep` of a rollout seeded with `seed`.
pub fn run_episode<S: Scalar>(
    env: &Env,
    policies: &[Policy<S>],
    ep: usize,
    seed: u64,
    algo: &str,
) -> Result<MetricsRecord> {
    let cfg = env.config();
    let mut rng = rng::stream(seed, ep as u64);
    let mut state = env.reset();
    let (mut reward, mut aoi, mut aoi_term, mut power) = (0.0, 0.0, 0.0, 0.0);
    let mut obs = env.observe_all(&state);
    loop {
        let actions = policies
            .iter()
            .zip(&obs)
            .map(|(p, o)| {
                let id = p.act(o, state.t, cfg.n_devices, &mut rng)?;
                AgentAction::decode(id, cfg.n_devices)
            })
            .collect::<Result<Vec<_>>>()?;
        let (next, out) = env.step(&state, &actions)?;
        reward += out.reward;
        aoi_term += out.aoi_term;
        power += out.power;
        aoi += next.aoi.iter().map(|&a| f64::from(a)).sum::<f64>() / cfg.n_devices as f64;
        state = next;
        obs = out.observations;
        if out.done {
            break;
        }
    }
    let t = cfg.horizon as f64;
    Ok(MetricsRecord {
        index: ep,
        reward: reward / t,
        aoi: aoi / t,
        aoi_term: aoi_term / t,
        power: power / t,
        loss: None,
        lambda: env.task().lambda,
        seed,
        algo: algo.to_string(),
    })
}

/// Mean of `records`, tagged with `index`. Losses are averaged over the
/// records that carry one.
pub fn summarize(records: &[MetricsRecord], index: usize) -> Result<MetricsRecord> {
    let first = records.first().ok_or(Error::EmptyBatch)?;
    let n = records.len() as f64;
    let mean = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let losses: Vec<f64> = records.iter().filter_map(|r| r.loss).collect();
    Ok(MetricsRecord {
        index,
        reward: mean(|r| r.reward),
        aoi: mean(|r| r.aoi),
        aoi_term: mean(|r| r.aoi_term),
        power: mean(|r| r.power),
        loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        lambda: first.lambda,
        seed: first.seed,
        algo: first.algo.clone(),
    })
}

/// Greedy evaluation of per-agent networks, averaged over `episodes`.
pub fn evaluate_greedy<S: Scalar>(
    env: &Env,
    nets: &[NetParams<S>],
    episodes: usize,
    seed: u64,
    algo: &str,
) -> Result<MetricsRecord> {
    let policies = Policy::greedy_set(nets);
    summarize(&rollout(env, &policies, episodes.max(1), seed, algo)?, 0)
}

/// Baseline evaluation, averaged over `episodes`.
pub fn evaluate_baseline(env: &Env, kind: PolicyKind, episodes: usize, seed: u64) -> Result<Vec<MetricsRecord>> {
    let policies = Policy::<f64>::baseline_set(kind, env)?;
    rollout(env, &policies, episodes, seed, kind.tag())
}

/// Metric file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    JsonLines,
}

impl Format {
    /// Format implied by a file extension: `.jsonl` or `.json` selects
    /// JSON lines, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "json") => Format::JsonLines,
            _ => Format::Csv,
        }
    }
}

/// Writes a header followed by one row per record. Floats use the shortest
/// representation that parses back to the same value.
pub fn emit(records: &[MetricsRecord], path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
            let wrap = |e: csv::Error| Error::io(path, e.into());
            w.write_record(COLUMNS).map_err(wrap)?;
            for r in records {
                w.serialize(r).map_err(wrap)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        Format::JsonLines => {
            let mut w = BufWriter::new(file);
            let io = |e| Error::io(path, e);
            writeln!(w, "{}", serde_json::to_string(&COLUMNS).expect("static header")).map_err(io)?;
            for r in records {
                let line = serde_json::to_string(r).map_err(|e| Error::io(path, e.into()))?;
                writeln!(w, "{line}").map_err(io)?;
            }
            w.flush().map_err(io)
        }
    }
}

/// Reads a file written by [`emit`].
pub fn read_metrics(path: impl AsRef<Path>, format: Format) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    match format {
        Format::Csv => {
            let mut r = csv::ReaderBuilder::new().from_reader(file);
            let header = r.headers().map_err(|e| parse(1, e.to_string()))?;
            if header.iter().ne(COLUMNS) {
                return Err(parse(1, format!("unexpected columns {header:?}")));
            }
            r.deserialize()
                .enumerate()
                .map(|(i, rec)| rec.map_err(|e| parse(i + 2, e.to_string())))
                .collect()
        }
        Format::JsonLines => {
            let mut lines = BufReader::new(file).lines();
            let header = lines
                .next()
                .ok_or_else(|| parse(1, "missing header".into()))?
                .map_err(|e| Error::io(path, e))?;
            let cols: Vec<String> = serde_json::from_str(&header).map_err(|e| parse(1, e.to_string()))?;
            if cols.iter().map(String::as_str).ne(COLUMNS) {
                return Err(parse(1, format!("unexpected columns {cols:?}")));
            }
            lines
                .enumerate()
                .map(|(i, l)| {
                    let l = l.map_err(|e| Error::io(path, e))?;
                    serde_json::from_str(&l).map_err(|e| parse(i + 2, e.to_string()))
                })
                .collect()
        }
    }
}

/// Range of trade-off weights over which the power term matters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaBounds {
    pub min: f64,
    pub max: f64,
    /// Random-walk mean of `sum_d delta_d A_d` per step.
    pub aoi_term: f64,
    /// Random-walk mean transmit power per step, watts.
    pub power: f64,
}

impl LambdaBounds {
    /// `n` values spaced evenly in log scale from `min` to `max`.
    pub fn log_spaced(&self, n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![(self.min * self.max).sqrt()],
            _ => {
                let (a, b) = (self.min.ln(), self.max.ln());
                (0..n)
                    .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
                    .collect()
            }
        }
    }

    /// Log-uniform draw.
    pub fn sample(&self, rng: &mut rng::Rng) -> f64 {
        use rand::Rng as _;
        let (a, b) = (self.min.ln(), self.max.ln());
        if a == b {
            return self.min;
        }
        rng.gen_range(a..b).exp()
    }
}

/// Estimates, under random-walk play with `lambda = 0`, the mean AoI term
/// and mean power per step, and returns the weights at which the power
/// term amounts to `low_ratio` and `high_ratio` of the AoI term.
pub fn derive_lambda_bounds(
    env: &Env,
    episodes: usize,
    seed: u64,
    low_ratio: f64,
    high_ratio: f64,
) -> Result<LambdaBounds> {
    if !(low_ratio > 0.0 && high_ratio >= low_ratio) {
        return Err(Error::Config(format!(
            "lambda ratios must satisfy 0 < low <= high, got {low_ratio} and {high_ratio}"
        )));
    }
    let probe = Env::new(env.config().clone(), crate::env::TaskSpec::new(0.0, env.task().layout_seed))?;
    let s = summarize(&evaluate_baseline(&probe, PolicyKind::Random, episodes, seed)?, 0)?;
    if !(s.power > 0.0) {
        return Err(Error::Config("random play transmits no power; lambda has no effect".into()));
    }
    let unit = s.aoi_term / s.power;
    Ok(LambdaBounds {
        min: low_ratio * unit,
        max: high_ratio * unit,
        aoi_term: s.aoi_term,
        power: s.power,
    })
}
