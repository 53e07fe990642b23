//! Acceptance suite. Each test checks one criterion, writes a
//! `[criterion N] PASS|FAIL ...` line to stderr (bypassing output capture)
//! and then asserts.
//!
//! Criteria 5 to 9 run at the reduced desk scale: 5 x 5 grid, 4 devices,
//! 2 UAVs, T = 50, 2000 transitions per agent, seeds 0, 1 and 2. Datasets and
//! the offline reference runs are computed once and shared.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use aoi_marl::data::{generate_offline_dataset, verify_replay, DatasetBundle};
use aoi_marl::env::{aoi_update, channel_gain, transmit_power};
use aoi_marl::eval::{evaluate_greedy, MetricsRecord};
use aoi_marl::experiments::{first_reaching, mean_reward_curve, DeskSuite};
use aoi_marl::losses::{
    cql_loss_independent, ctde_cql_loss, ctde_dqn_loss, dqn_loss_independent, vdn_global_q, AgentBatch, Minibatch,
};
use aoi_marl::meta::{self, inner_update, meta_loss, InnerLoop, MetaConfig, MetaVariant, TaskBatches};
use aoi_marl::qnet::NetParams;
use aoi_marl::scalar::logsumexp;
use aoi_marl::trainers::{train_offline_from, BehaviorConfig, TrainConfig};
use aoi_marl::{rng, Cell, EnvConfig, Objective, QNet, TaskSpec};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const FINAL_EPOCHS: usize = 100;
const BUDGET_EPOCHS: usize = 30;
const ADAPT_EPOCHS: usize = 15;
const SUBSAMPLE: usize = 200;
/// Inner step for desk meta-training. 1e-2 drives the outer loop to diverge on this network.
const INNER_LR: f64 = 1e-3;

fn report(n: u32, title: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[criterion {n}] {status} {title}: {detail}");
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

// ---------------------------------------------------------------------------
// Shared desk-scale state

fn suite() -> &'static DeskSuite {
    static SUITE: OnceLock<DeskSuite> = OnceLock::new();
    SUITE.get_or_init(|| DeskSuite::standard().expect("desk suite"))
}

/// Datasets of grid task `k`, one per seed.
fn datasets(k: usize) -> &'static [DatasetBundle] {
    static DATA: [OnceLock<Vec<DatasetBundle>>; 5] = [const { OnceLock::new() }; 5];
    DATA[k].get_or_init(|| {
        SEEDS
            .iter()
            .map(|&s| suite().dataset(k, s).expect("dataset"))
            .collect()
    })
}

fn held_out() -> &'static [DatasetBundle] {
    datasets(suite().held_out())
}

fn train(bundle: &DatasetBundle, algo: Objective, epochs: usize, seed: u64, init: Option<Vec<QNet>>) -> Vec<MetricsRecord> {
    let cfg = TrainConfig {
        algo,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    train_offline_from::<f64>(bundle, &cfg, init).expect("offline training").metrics
}

/// From-scratch runs of every objective on the held-out task, per seed.
fn offline_runs() -> &'static HashMap<Objective, Vec<Vec<MetricsRecord>>> {
    static RUNS: OnceLock<HashMap<Objective, Vec<Vec<MetricsRecord>>>> = OnceLock::new();
    RUNS.get_or_init(|| {
        Objective::ALL
            .into_iter()
            .map(|algo| {
                let runs = SEEDS
                    .iter()
                    .zip(held_out())
                    .map(|(&s, b)| train(b, algo, FINAL_EPOCHS, s, None))
                    .collect();
                (algo, runs)
            })
            .collect()
    })
}

fn reward_at(runs: &[Vec<MetricsRecord>], epoch: usize) -> f64 {
    mean(runs.iter().map(|r| r[epoch].reward))
}

fn meta_init(variant: MetaVariant, tasks: &[usize], seed_index: usize) -> Vec<QNet> {
    let bundles: Vec<DatasetBundle> = tasks.iter().map(|&k| datasets(k)[seed_index].clone()).collect();
    let cfg = MetaConfig {
        variant,
        seed: SEEDS[seed_index],
        inner_lr: INNER_LR,
        ..MetaConfig::default()
    };
    meta::meta_train::<f64>(&bundles, &cfg).expect("meta-training").nets
}

/// Fine-tuning curves on the held-out task from meta-initializations.
fn adapted_runs(variant: MetaVariant, tasks: &[usize]) -> Vec<Vec<MetricsRecord>> {
    (0..SEEDS.len())
        .map(|i| {
            let init = meta_init(variant, tasks, i);
            train(&held_out()[i], variant.objective(), ADAPT_EPOCHS, SEEDS[i], Some(init))
        })
        .collect()
}

fn fmt_curve(curve: &[f64]) -> String {
    curve.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// Small random instances for the exact checks

const OBS: usize = 3;
const ACTIONS: usize = 5;

fn random_batch(n_agents: usize, n: usize, seed: u64) -> Minibatch<f64> {
    let mut r = rng::seeded(seed);
    let rewards: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..0.0)).collect();
    let dones: Vec<bool> = (0..n).map(|_| r.gen_bool(0.2)).collect();
    let agents = (0..n_agents)
        .map(|_| AgentBatch {
            obs_dim: OBS,
            obs: (0..n * OBS).map(|_| r.gen_range(-1.0..1.0)).collect(),
            actions: (0..n).map(|_| r.gen_range(0..ACTIONS)).collect(),
            rewards: rewards.clone(),
            next_obs: (0..n * OBS).map(|_| r.gen_range(-1.0..1.0)).collect(),
            dones: dones.clone(),
        })
        .collect();
    Minibatch { agents }
}

fn random_nets(n_agents: usize, hidden: usize, seed: u64) -> Vec<QNet> {
    (0..n_agents)
        .map(|u| NetParams::init(OBS, &[hidden], ACTIONS, rng::derive(seed, u as u64)))
        .collect()
}

fn bits_equal(a: &[QNet], b: &[QNet]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.n_params() == y.n_params() && x.values().zip(y.values()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn halved(a: &[QNet], b: &[QNet]) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| x.values().zip(y.values()).all(|(p, q)| p.to_bits() == (0.5 * q).to_bits()))
}

fn small_dataset() -> &'static DatasetBundle {
    static DATA: OnceLock<DatasetBundle> = OnceLock::new();
    DATA.get_or_init(|| {
        let behavior = BehaviorConfig {
            hidden: vec![16],
            learning_starts: 100,
            ..BehaviorConfig::default()
        };
        let task = TaskSpec::new(suite().lambdas[suite().held_out()], 0);
        generate_offline_dataset::<f64>(&EnvConfig::desk(), &task, 3000, &behavior, 7).expect("dataset")
    })
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_closed_form() {
    let start = Instant::now();
    let c = EnvConfig::full_size();
    // snr_min = 2^(5e6 bits / 1e6 Hz) - 1 = 31, noise 1e-13 W, g0 = 1000,
    // altitude 100 m, cells 100 m apart.
    let cases = [
        ((3, 3), (3, 3), 1000.0 / 1e4, 31.0 * 1e-13 * 1e4 / 1000.0),
        ((4, 3), (3, 3), 1000.0 / 2e4, 31.0 * 1e-13 * 2e4 / 1000.0),
        ((5, 5), (3, 3), 1000.0 / 9e4, 31.0 * 1e-13 * 9e4 / 1000.0),
    ];
    let mut worst = 0.0f64;
    for ((dx, dy), (ux, uy), gain, power) in cases {
        let (d, u) = (Cell::new(dx, dy), Cell::new(ux, uy));
        worst = worst.max(rel(channel_gain(&c, d, u), gain));
        worst = worst.max(rel(transmit_power(&c, d, u), power));
    }
    let same_cell = transmit_power(&c, Cell::new(3, 3), Cell::new(3, 3));
    let aoi_ok = aoi_update(5, true) == 1 && aoi_update(5, false) == 6 && aoi_update(1, false) == 2;
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && aoi_ok && elapsed < 1.0;
    report(
        1,
        "closed-form power, gain and AoI",
        pass,
        &format!("same-cell power {same_cell:.4e} W, max rel error {worst:.2e}, aoi ok {aoi_ok}, {elapsed:.3} s"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_loss_identities() {
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let online = random_nets(2, 6, seed);
        let target = random_nets(2, 6, seed ^ 0xff);
        let batch = random_batch(2, 8, seed);
        let gamma = 0.95;

        // alpha = 0 halves DQN.
        let dqn = dqn_loss_independent(&online[0], &target[0], &batch.agents[0], gamma).unwrap();
        let cql = cql_loss_independent(&online[0], &target[0], &batch.agents[0], gamma, 0.0).unwrap();
        if cql.loss.to_bits() != (0.5 * dqn.loss).to_bits() || !halved(&cql.grads, &dqn.grads) {
            failures.push(format!("seed {seed}: independent alpha = 0"));
        }
        let jd = ctde_dqn_loss(&online, &target, &batch, gamma).unwrap();
        let jc = ctde_cql_loss(&online, &target, &batch, gamma, 0.0).unwrap();
        if jc.loss.to_bits() != (0.5 * jd.loss).to_bits() || !halved(&jc.grads, &jd.grads) {
            failures.push(format!("seed {seed}: joint alpha = 0"));
        }

        // One agent: joint equals independent.
        let one = Minibatch {
            agents: vec![batch.agents[0].clone()],
        };
        let (o1, t1) = (&online[..1], &target[..1]);
        let a = ctde_dqn_loss(o1, t1, &one, gamma).unwrap();
        let b = ctde_cql_loss(o1, t1, &one, gamma, 0.7).unwrap();
        let c = cql_loss_independent(&online[0], &target[0], &batch.agents[0], gamma, 0.7).unwrap();
        if a.loss.to_bits() != dqn.loss.to_bits()
            || !bits_equal(&a.grads, &dqn.grads)
            || b.loss.to_bits() != c.loss.to_bits()
            || !bits_equal(&b.grads, &c.grads)
        {
            failures.push(format!("seed {seed}: single-agent collapse"));
        }

        // Joint Q is the sum of per-agent Q: with gamma = 0 the joint loss is
        // the mean of (r - Q1 - Q2)^2 from plain forward passes.
        let g0 = ctde_dqn_loss(&online, &target, &batch, 0.0).unwrap();
        let n = batch.len();
        let q: Vec<Vec<f64>> = online
            .iter()
            .zip(&batch.agents)
            .map(|(net, b)| net.forward_batch(&b.obs, n).unwrap())
            .collect();
        let oracle = (0..n)
            .map(|s| {
                let per_agent: Vec<f64> = (0..2).map(|u| q[u][s * ACTIONS + batch.agents[u].actions[s]]).collect();
                let e = batch.agents[0].rewards[s] - vdn_global_q(&per_agent);
                e * e
            })
            .sum::<f64>()
            / n as f64;
        if rel(g0.loss, oracle) > 1e-12 {
            failures.push(format!("seed {seed}: value decomposition {} vs {oracle}", g0.loss));
        }
    }
    let vdn_ok = vdn_global_q(&[1.5, -0.5]) == 1.0 && vdn_global_q(&[2.25]) == 2.25 && vdn_global_q(&[0.0, 0.0]) == 0.0;
    if !vdn_ok {
        failures.push("vdn sums".into());
    }

    // Log-sum-exp shift by +1e4 on dyadic inputs.
    let xs: Vec<f64> = (0..50).map(|i| (i as f64 - 25.0) * 0.125).collect();
    let shifted: Vec<f64> = xs.iter().map(|x| x + 1e4).collect();
    let (a, b) = (logsumexp(&xs), logsumexp(&shifted));
    let shift_err = (b - a - 1e4).abs();
    if !b.is_finite() || shift_err > 4.0 * f64::EPSILON * 1e4 {
        failures.push(format!("logsumexp shift error {shift_err:e}"));
    }

    let pass = failures.is_empty();
    report(
        2,
        "loss identities",
        pass,
        &if pass {
            format!("20 random instances bit-exact, logsumexp shift error {shift_err:.1e}")
        } else {
            failures.join("; ")
        },
    );
    assert!(pass);
}

fn perturbed(nets: &[QNet], u: usize, j: usize, h: f64) -> Vec<QNet> {
    let mut out = nets.to_vec();
    *out[u].values_mut().nth(j).unwrap() += h;
    out
}

fn fd_error(nets: &[QNet], grads: &[QNet], loss: impl Fn(&[QNet]) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (u, g) in grads.iter().enumerate() {
        for (j, &analytic) in g.values().enumerate() {
            let fd = (loss(&perturbed(nets, u, j, h)) - loss(&perturbed(nets, u, j, -h))) / (2.0 * h);
            worst = worst.max((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4));
        }
    }
    worst
}

#[test]
fn criterion_03_gradient_oracle() {
    let start = Instant::now();
    let (gamma, alpha) = (0.9, 0.8);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut probes = 0;
    for p in 0..20u64 {
        let seed = rng::derive(p, 0x0a11);
        let hidden = 2 + (p as usize % 7);
        let online = random_nets(2, hidden, seed);
        let target = random_nets(2, hidden, seed ^ 1);
        let batch = random_batch(2, 6, seed);
        let mut errs = Vec::new();

        let lg = dqn_loss_independent(&online[0], &target[0], &batch.agents[0], gamma).unwrap();
        errs.push(fd_error(&online[..1], &lg.grads, |q| {
            dqn_loss_independent(&q[0], &target[0], &batch.agents[0], gamma).unwrap().loss
        }));
        let lg = cql_loss_independent(&online[0], &target[0], &batch.agents[0], gamma, alpha).unwrap();
        errs.push(fd_error(&online[..1], &lg.grads, |q| {
            cql_loss_independent(&q[0], &target[0], &batch.agents[0], gamma, alpha).unwrap().loss
        }));
        let lg = ctde_dqn_loss(&online, &target, &batch, gamma).unwrap();
        errs.push(fd_error(&online, &lg.grads, |q| ctde_dqn_loss(q, &target, &batch, gamma).unwrap().loss));
        let lg = ctde_cql_loss(&online, &target, &batch, gamma, alpha).unwrap();
        errs.push(fd_error(&online, &lg.grads, |q| {
            ctde_cql_loss(q, &target, &batch, gamma, alpha).unwrap().loss
        }));

        // Meta-loss over two tasks; without an inner step the first-order
        // gradient is the exact one.
        let targets = vec![target.clone(), random_nets(2, hidden, seed ^ 2)];
        let tasks: Vec<TaskBatches<f64>> = (0..2)
            .map(|i| TaskBatches {
                support: vec![random_batch(2, 4, seed ^ (10 + i))],
                query: random_batch(2, 4, seed ^ (20 + i)),
            })
            .collect();
        let objective = if p % 2 == 0 { Objective::CtdeCql } else { Objective::IndependentCql };
        let inner = InnerLoop {
            objective,
            gamma,
            alpha,
            lr: 0.0,
        };
        let ml = meta_loss(&online, &targets, &tasks, &inner).unwrap();
        errs.push(fd_error(&online, &ml.grads, |q| meta_loss(q, &targets, &tasks, &inner).unwrap().loss));

        let names = ["i-dqn", "i-cql", "ctde-dqn", "ctde-cql", "meta"];
        for (name, e) in names.into_iter().zip(errs) {
            probes += 1;
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((name, e)),
            }
        }
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = probes == 100 && max <= 1e-4 && elapsed < 60.0;
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        3,
        "gradients vs central differences",
        pass,
        &format!("{probes} probes, max rel error {max:.2e} ({detail}), {elapsed:.2} s"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_maml_identities() {
    let mut failures = Vec::new();
    for seed in 0..10u64 {
        let theta = random_nets(2, 6, seed);
        let targets = random_nets(2, 6, seed ^ 3);
        let task = TaskBatches {
            support: vec![random_batch(2, 8, seed ^ 5)],
            query: random_batch(2, 8, seed ^ 6),
        };
        for objective in [Objective::IndependentCql, Objective::CtdeCql] {
            let frozen = InnerLoop {
                objective,
                gamma: 0.9,
                alpha: 1.0,
                lr: 0.0,
            };
            let adapted = inner_update(&theta, &targets, &task.support, &frozen).unwrap();
            if !bits_equal(&adapted, &theta) {
                failures.push(format!("seed {seed} {objective}: zero inner rate moved the weights"));
            }
            let ml = meta_loss(&theta, std::slice::from_ref(&targets), std::slice::from_ref(&task), &frozen).unwrap();
            let plain = objective.evaluate(&theta, &targets, &task.query, 0.9, 1.0).unwrap();
            if ml.loss.to_bits() != plain.loss.to_bits() || !bits_equal(&ml.grads, &plain.grads) {
                failures.push(format!("seed {seed} {objective}: meta-gradient differs from query gradient"));
            }

            let live = InnerLoop { lr: 1e-2, ..frozen };
            let once = meta_loss(&theta, std::slice::from_ref(&targets), std::slice::from_ref(&task), &live).unwrap();
            let twice = meta_loss(
                &theta,
                &[targets.clone(), targets.clone()],
                &[task.clone(), task.clone()],
                &live,
            )
            .unwrap();
            if twice.loss.to_bits() != (2.0 * once.loss).to_bits() {
                failures.push(format!("seed {seed} {objective}: duplicated task did not double the loss"));
            }
        }
    }

    let bundle = small_dataset();
    let init = aoi_marl::trainers::init_nets::<f64>(&bundle.meta.env, &[32, 32], 5);
    let cfg = MetaConfig {
        hidden: vec![32, 32],
        ..MetaConfig::default()
    };
    let out = meta::adapt::<f64>(&init, bundle, 0, &cfg, 1).unwrap();
    if !bits_equal(&out.nets, &init) || out.before != out.after {
        failures.push("zero-step adaptation changed the policy".into());
    }

    let pass = failures.is_empty();
    report(
        4,
        "MAML identities",
        pass,
        &if pass {
            "zero inner rate, duplicated tasks and zero-step adaptation exact on 10 instances".to_string()
        } else {
            failures.join("; ")
        },
    );
    assert!(pass);
}

#[test]
fn criterion_05_conservative_beats_plain_dqn() {
    let start = Instant::now();
    let runs = offline_runs();
    let r = |a: Objective| reward_at(&runs[&a], FINAL_EPOCHS);
    let per_seed = |a: Objective| {
        runs[&a]
            .iter()
            .map(|m| format!("{:.2}", m[FINAL_EPOCHS].reward))
            .collect::<Vec<_>>()
            .join("/")
    };
    let (idqn, icql, cdqn, ccql) = (
        r(Objective::IndependentDqn),
        r(Objective::IndependentCql),
        r(Objective::CtdeDqn),
        r(Objective::CtdeCql),
    );
    let pass = icql > idqn && ccql > cdqn;
    report(
        5,
        "CQL outperforms DQN on the same dataset",
        pass,
        &format!(
            "after {FINAL_EPOCHS} epochs: i-cql {icql:.3} [{}] vs i-dqn {idqn:.3} [{}]; ctde-cql {ccql:.3} [{}] vs ctde-dqn {cdqn:.3} [{}]; {:.0} s",
            per_seed(Objective::IndependentCql),
            per_seed(Objective::IndependentDqn),
            per_seed(Objective::CtdeCql),
            per_seed(Objective::CtdeDqn),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_meta_initialization_speeds_up_adaptation() {
    let start = Instant::now();
    let tasks = suite().training_tasks(4).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for variant in [MetaVariant::IndependentCql, MetaVariant::CtdeCql] {
        let reference = reward_at(&offline_runs()[&variant.objective()], BUDGET_EPOCHS);
        let curve = mean_reward_curve(&adapted_runs(variant, &tasks));
        let hit = first_reaching(&curve, reference);
        let ok = hit.is_some_and(|e| e <= ADAPT_EPOCHS);
        pass &= ok;
        lines.push(format!(
            "{}: target {reference:.3} (from-scratch epoch {BUDGET_EPOCHS}), reached at {}; curve [{}]",
            variant.tag(),
            hit.map_or("never".to_string(), |e| format!("epoch {e}")),
            fmt_curve(&curve)
        ));
    }
    report(
        6,
        "meta-initialized adaptation within 15 epochs",
        pass,
        &format!("tasks {tasks:?}; {}; {:.0} s", lines.join("; "), start.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_07_more_data_helps() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for algo in [Objective::IndependentCql, Objective::CtdeCql] {
        let full = reward_at(&offline_runs()[&algo], BUDGET_EPOCHS);
        let small: Vec<Vec<MetricsRecord>> = SEEDS
            .iter()
            .zip(held_out())
            .map(|(&s, b)| {
                let sub = b.subsample(SUBSAMPLE, rng::derive(s, 0x5ab5)).unwrap();
                train(&sub, algo, BUDGET_EPOCHS, s, None)
            })
            .collect();
        let small = reward_at(&small, BUDGET_EPOCHS);
        pass &= full >= small;
        lines.push(format!("{algo}: {} entries {full:.3} vs {SUBSAMPLE} entries {small:.3}", held_out()[0].len()));
    }
    report(
        7,
        "larger dataset gives at least the reward of a subsample",
        pass,
        &format!("{}; {:.0} s", lines.join("; "), start.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_08_two_task_meta_beats_random_init() {
    let start = Instant::now();
    let tasks = suite().training_tasks(2).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for variant in [MetaVariant::IndependentCql, MetaVariant::CtdeCql] {
        let scratch = reward_at(&offline_runs()[&variant.objective()], ADAPT_EPOCHS);
        let meta = reward_at(&adapted_runs(variant, &tasks), ADAPT_EPOCHS);
        pass &= meta > scratch;
        lines.push(format!("{}: meta {meta:.3} vs random {scratch:.3}", variant.tag()));
    }
    report(
        8,
        "two-task meta-initialization beats random initialization",
        pass,
        &format!(
            "tasks {tasks:?}, {ADAPT_EPOCHS} epochs; {}; {:.0} s",
            lines.join("; "),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_power_falls_with_lambda() {
    let start = Instant::now();
    let s = suite();
    let sweep = s.sweep();
    let powers: Vec<f64> = sweep
        .iter()
        .map(|&k| {
            mean(SEEDS.iter().zip(datasets(k)).map(|(&seed, b)| {
                let cfg = TrainConfig {
                    algo: Objective::CtdeCql,
                    epochs: BUDGET_EPOCHS,
                    seed,
                    ..TrainConfig::default()
                };
                let out = train_offline_from::<f64>(b, &cfg, None).unwrap();
                evaluate_greedy(&b.env().unwrap(), &out.nets, 100, seed, "ctde-cql")
                    .unwrap()
                    .power
            }))
        })
        .collect();
    let pass = powers.windows(2).all(|w| w[1] <= 1.05 * w[0]);
    let detail = sweep
        .iter()
        .zip(&powers)
        .map(|(&k, p)| format!("lambda {:.3e}: {:.3} pW", s.lambdas[k], p * 1e12))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        9,
        "evaluated power non-increasing in lambda (5% slack)",
        pass,
        &format!("{detail}; {:.0} s", start.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

fn collect_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            collect_files(&p, out);
        } else {
            out.push(p);
        }
    }
}

#[test]
fn criterion_10_cli_is_deterministic() {
    let bin = env!("CARGO_BIN_EXE_aoi-marl");
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    std::fs::write(
        &config,
        "[env]\ngrid_size = 5\nn_devices = 4\nhorizon = 50\n\n\
         [behavior]\nhidden = [16]\nlearning_starts = 100\n\n\
         [data]\nsize = 150\n\n\
         [train]\nepochs = 2\nhidden = [16, 16]\n\n\
         [meta]\nepochs = 2\nhidden = [16, 16]\n\n\
         [eval]\nepisodes = 3\n",
    )
    .unwrap();
    let run = |root: &Path| {
        let o = |s: &str| root.join(s).display().to_string();
        let commands: Vec<Vec<String>> = vec![
            vec!["gen-data".into()],
            vec!["gen-data".into(), "--tasks".into(), "2".into()],
            vec!["train".into(), "--algo".into(), "i-cql".into(), "--data".into(), o("gen-data")],
            vec!["meta-train".into(), "--variant".into(), "m-ctde-cql".into(), "--tasks".into(), "2".into(), "--data".into(), o("gen-data-1")],
            vec!["adapt".into(), "--init".into(), o("meta-train"), "--data".into(), o("gen-data"), "--steps".into(), "4".into()],
            vec!["eval".into(), "--weights".into(), o("train"), "--data".into(), o("gen-data")],
            vec!["baseline".into(), "--policy".into(), "rw".into()],
            vec!["baseline".into(), "--policy".into(), "det".into()],
        ];
        let mut names: HashMap<String, usize> = HashMap::new();
        for args in commands {
            let n = names.entry(args[0].clone()).or_default();
            let dir = if *n == 0 { o(&args[0]) } else { o(&format!("{}-{n}", args[0])) };
            *n += 1;
            let status = Command::new(bin)
                .args(["--config", config.to_str().unwrap(), "--seed", "11", "--out", &dir])
                .args(&args)
                .output()
                .unwrap();
            assert!(status.status.success(), "{args:?}: {}", String::from_utf8_lossy(&status.stderr));
        }
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);
    let mut files = Vec::new();
    collect_files(&a, &mut files);
    files.sort();
    let mut differing = Vec::new();
    for f in &files {
        let rel_path = f.strip_prefix(&a).unwrap();
        let other = b.join(rel_path);
        if std::fs::read(f).unwrap() != std::fs::read(&other).unwrap_or_default() {
            differing.push(rel_path.display().to_string());
        }
    }
    let metrics = files
        .iter()
        .filter(|f| f.extension().is_some_and(|e| e == "csv"))
        .count();
    let pass = differing.is_empty() && metrics > 0;
    report(
        10,
        "CLI reruns are bit-identical",
        pass,
        &if pass {
            format!("{} files ({metrics} csv) identical across two runs of 8 commands", files.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    );
    assert!(pass);
}

#[test]
fn criterion_11_dataset_integrity() {
    let bundle = small_dataset();
    let tmp = tempfile::tempdir().unwrap();
    bundle.save(tmp.path()).unwrap();
    let back = DatasetBundle::load(tmp.path()).unwrap();
    let bit_exact = back == *bundle
        && back.agents.iter().flatten().zip(bundle.agents.iter().flatten()).all(|(x, y)| {
            x.reward.to_bits() == y.reward.to_bits()
                && x.obs.iter().zip(&y.obs).all(|(p, q)| p.to_bits() == q.to_bits())
                && x.next_obs.iter().zip(&y.next_obs).all(|(p, q)| p.to_bits() == q.to_bits())
        });
    let replayed = verify_replay(&back);
    let pass = bit_exact && replayed.is_ok();
    report(
        11,
        "dataset round trip and replay",
        pass,
        &format!(
            "{} transitions x {} agents, round trip bit-exact {bit_exact}, replay {}",
            bundle.len(),
            bundle.n_agents(),
            match &replayed {
                Ok(n) => format!("reproduced {n} steps"),
                Err(e) => format!("failed: {e}"),
            }
        ),
    );
    assert!(pass);
}
