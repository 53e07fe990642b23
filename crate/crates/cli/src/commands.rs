use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use aoi_marl::data::{self, DatasetBundle, RETAINED_FRACTION};
use aoi_marl::env::{Env, TaskSpec};
use aoi_marl::eval::{self, Format, MetricsRecord};
use aoi_marl::meta::{self, MetaEpochRecord};
use aoi_marl::policies::{Policy, PolicyKind};
use aoi_marl::rng;
use aoi_marl::trainers;
use aoi_marl::QNet;

use crate::config::Config;
use crate::{Cli, Command, FileFormat, Global};

/// Executes one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = g.seed {
        cfg.train.seed = s;
        cfg.meta.seed = s;
    }
    match cli.command {
        Command::GenData { size, tasks, lambda } => gen_data(g, &cfg, size, tasks, lambda),
        Command::Train {
            algo,
            data,
            epochs,
            init,
        } => {
            cfg.train.algo = algo.into();
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            train(g, &cfg, &data, init.as_deref())
        }
        Command::MetaTrain {
            variant,
            tasks,
            data,
            epochs,
        } => {
            cfg.meta.variant = variant.into();
            if let Some(e) = epochs {
                cfg.meta.epochs = e;
            }
            meta_train(g, &cfg, tasks, &data)
        }
        Command::Adapt {
            init,
            data,
            steps,
            epochs,
            variant,
        } => {
            if let Some(v) = variant {
                cfg.meta.variant = v.into();
                cfg.train.algo = cfg.meta.variant.objective();
            }
            adapt(g, &cfg, &init, &data, steps, epochs)
        }
        Command::Eval {
            weights,
            data,
            episodes,
            lambda,
        } => evaluate(g, &cfg, &weights, data.as_deref(), episodes, lambda),
        Command::Baseline {
            policy,
            episodes,
            lambda,
        } => baseline(g, &cfg, policy.into(), episodes, lambda),
    }
}

fn seed(g: &Global) -> u64 {
    g.seed.unwrap_or(0)
}

fn format(g: &Global) -> Format {
    match g.format {
        FileFormat::Csv => Format::Csv,
        FileFormat::Jsonl => Format::JsonLines,
    }
}

fn metrics_path(g: &Global, stem: &str) -> PathBuf {
    let ext = match g.format {
        FileFormat::Csv => "csv",
        FileFormat::Jsonl => "jsonl",
    };
    g.out.join(format!("{stem}.{ext}"))
}

fn prepare_out(g: &Global, cfg: &Config) -> Result<()> {
    fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
    let p = g.out.join("config.toml");
    fs::write(&p, cfg.to_toml()).with_context(|| format!("writing {}", p.display()))
}

fn write_metrics(g: &Global, stem: &str, records: &[MetricsRecord]) -> Result<PathBuf> {
    let p = metrics_path(g, stem);
    eval::emit(records, &p, format(g))?;
    Ok(p)
}

fn save_weights(dir: &Path, nets: &[QNet]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (u, n) in nets.iter().enumerate() {
        n.save(dir.join(format!("agent-{u}.txt")))?;
    }
    Ok(())
}

/// Loads `agent-0.txt`, `agent-1.txt`, ... from `dir`; a `weights`
/// subdirectory is searched when `dir` holds none.
fn load_weights(dir: &Path) -> Result<Vec<QNet>> {
    let dir = if dir.join("agent-0.txt").exists() {
        dir.to_path_buf()
    } else {
        dir.join("weights")
    };
    let mut nets = Vec::new();
    loop {
        let p = dir.join(format!("agent-{}.txt", nets.len()));
        if !p.exists() {
            break;
        }
        nets.push(QNet::load(&p)?);
    }
    if nets.is_empty() {
        bail!("no agent weights found in {}", dir.display());
    }
    Ok(nets)
}

fn summary(r: &MetricsRecord) -> String {
    format!(
        "reward {:.4}  aoi {:.3}  power {:.3} pW",
        r.reward,
        r.aoi,
        r.power_pw()
    )
}

fn gen_data(g: &Global, cfg: &Config, size: Option<usize>, tasks: Option<usize>, lambda: Option<f64>) -> Result<()> {
    let size = size.unwrap_or(cfg.data.size);
    if size == 0 {
        bail!("--size must be positive");
    }
    let seed = seed(g);
    prepare_out(g, cfg)?;
    let steps = size * RETAINED_FRACTION;
    let make = |task: &TaskSpec, data_seed: u64, dir: &Path| -> Result<()> {
        let bundle = data::generate_offline_dataset::<f64>(&cfg.env, task, steps, &cfg.behavior, data_seed)?;
        data::verify_replay(&bundle)?;
        bundle.save(dir)?;
        println!("{}: {} transitions per agent, lambda {}", dir.display(), bundle.len(), task.lambda);
        Ok(())
    };
    match tasks {
        Some(0) => bail!("--tasks must be positive"),
        Some(n) => {
            if lambda.is_some() {
                bail!("--lambda and --tasks are mutually exclusive");
            }
            let bounds = cfg.lambda_bounds()?;
            let mut r = rng::stream(seed, 0x7a5c);
            let mut index = String::from("task,lambda,layout_seed\n");
            for i in 0..n {
                let task = TaskSpec::new(bounds.sample(&mut r), cfg.task.layout_seed);
                make(&task, rng::derive(seed, i as u64), &g.out.join(format!("task-{i}")))?;
                index.push_str(&format!("{i},{},{}\n", task.lambda, task.layout_seed));
            }
            let p = g.out.join("tasks.csv");
            fs::write(&p, index).with_context(|| format!("writing {}", p.display()))?;
        }
        None => {
            let task = match lambda {
                Some(l) => TaskSpec::new(l, cfg.task.layout_seed),
                None => cfg.task()?,
            };
            make(&task, seed, &g.out)?;
        }
    }
    Ok(())
}

fn train(g: &Global, cfg: &Config, data: &Path, init: Option<&Path>) -> Result<()> {
    let bundle = DatasetBundle::load(data)?;
    let init = init.map(load_weights).transpose()?;
    prepare_out(g, cfg)?;
    let out = trainers::train_offline_from::<f64>(&bundle, &cfg.train, init)?;
    let p = write_metrics(g, "metrics", &out.metrics)?;
    save_weights(&g.out.join("weights"), &out.nets)?;
    let last = out.metrics.last().expect("epoch 0 is always recorded");
    println!("{} after {} epochs: {}", cfg.train.algo, cfg.train.epochs, summary(last));
    println!("metrics written to {}", p.display());
    Ok(())
}

fn task_dirs(data: &Path, n: usize) -> Result<Vec<PathBuf>> {
    (0..n)
        .map(|i| {
            let d = data.join(format!("task-{i}"));
            if d.is_dir() {
                Ok(d)
            } else {
                bail!("{} does not exist; generate it with `gen-data --tasks {n}`", d.display())
            }
        })
        .collect()
}

fn meta_train(g: &Global, cfg: &Config, n_tasks: usize, data: &Path) -> Result<()> {
    if n_tasks == 0 {
        bail!("--tasks must be positive");
    }
    let bundles = task_dirs(data, n_tasks)?
        .iter()
        .map(DatasetBundle::load)
        .collect::<aoi_marl::Result<Vec<_>>>()?;
    prepare_out(g, cfg)?;
    let out = meta::meta_train::<f64>(&bundles, &cfg.meta)?;
    let p = g.out.join("meta.csv");
    write_meta_history(&p, &out.history)?;
    save_weights(&g.out.join("weights"), &out.nets)?;
    if let Some(last) = out.history.last() {
        println!("{} over {n_tasks} tasks: final meta-loss {:.6}", cfg.meta.variant.tag(), last.meta_loss);
    }
    println!("history written to {}", p.display());
    Ok(())
}

fn write_meta_history(path: &Path, history: &[MetaEpochRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["epoch", "meta_loss", "outer_steps"])?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn adapt(
    g: &Global,
    cfg: &Config,
    init: &Path,
    data: &Path,
    steps: Option<usize>,
    epochs: Option<usize>,
) -> Result<()> {
    let init = load_weights(init)?;
    let bundle = DatasetBundle::load(data)?;
    prepare_out(g, cfg)?;
    let (records, nets) = match (steps, epochs) {
        (Some(k), None) => {
            let out = meta::adapt::<f64>(&init, &bundle, k, &cfg.meta, cfg.eval.episodes)?;
            let mut after = out.after;
            after.index = k;
            println!("before: {}", summary(&out.before));
            println!("after {k} steps: {}", summary(&after));
            (vec![out.before, after], out.nets)
        }
        (None, Some(e)) => {
            let tc = trainers::TrainConfig {
                epochs: e,
                ..cfg.train.clone()
            };
            let out = trainers::train_offline_from::<f64>(&bundle, &tc, Some(init))?;
            println!("before: {}", summary(&out.metrics[0]));
            println!("after {e} epochs: {}", summary(out.metrics.last().expect("non-empty")));
            (out.metrics, out.nets)
        }
        _ => bail!("give exactly one of --steps and --epochs"),
    };
    write_metrics(g, "metrics", &records)?;
    save_weights(&g.out.join("weights"), &nets)?;
    Ok(())
}

fn evaluate(
    g: &Global,
    cfg: &Config,
    weights: &Path,
    data: Option<&Path>,
    episodes: Option<usize>,
    lambda: Option<f64>,
) -> Result<()> {
    let nets = load_weights(weights)?;
    let (env_cfg, mut task) = match data {
        Some(d) => {
            let b = DatasetBundle::load(d)?;
            (b.meta.env.clone(), b.meta.task)
        }
        None => (cfg.env.clone(), cfg.task()?),
    };
    if let Some(l) = lambda {
        task.lambda = l;
    }
    let env = Env::new(env_cfg, task)?;
    prepare_out(g, cfg)?;
    let episodes = episodes.unwrap_or(cfg.eval.episodes);
    let recs = eval::rollout(&env, &Policy::greedy_set(&nets), episodes, seed(g), "greedy-q")?;
    write_metrics(g, "metrics", &recs)?;
    if !recs.is_empty() {
        println!("greedy over {episodes} episodes: {}", summary(&eval::summarize(&recs, 0)?));
    }
    Ok(())
}

fn baseline(g: &Global, cfg: &Config, kind: PolicyKind, episodes: Option<usize>, lambda: Option<f64>) -> Result<()> {
    let mut task = cfg.task()?;
    if let Some(l) = lambda {
        task.lambda = l;
    }
    let env = Env::new(cfg.env.clone(), task)?;
    prepare_out(g, cfg)?;
    let episodes = episodes.unwrap_or(cfg.eval.episodes);
    let recs = eval::evaluate_baseline(&env, kind, episodes, seed(g))?;
    write_metrics(g, "metrics", &recs)?;
    if !recs.is_empty() {
        println!("{} over {episodes} episodes: {}", kind.tag(), summary(&eval::summarize(&recs, 0)?));
    }
    Ok(())
}
