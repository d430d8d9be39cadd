//! Per-seed training runs, worker pool and on-disk artifacts.
//!
//! A run of `method` with seed `s` writes into `OUT/<method>/seed_<s>/`:
//! `effective_config.json`, `metrics.jsonl` (one row per iteration),
//! `summary.json`, `checkpoints/iter_<t>.ckpt` and `final.ckpt`. A failed
//! run keeps the rows written so far and adds `error.txt`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use seqcomm_core::trainer::{Ablation, Event, RunMetrics, RunSummary, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config;

/// Iterations averaged for the "last" statistics of a run.
pub const SUMMARY_WINDOW: usize = 50;
/// Iterations that count as early in the hypergradient trend.
pub const EARLY_ITERATIONS: usize = 100;
/// Episodes used for the held-out message-gap probe.
pub const HELD_OUT_EPISODES: usize = 4;
const HELD_OUT_SEED_SALT: u64 = 0x6865_6c64;

/// Parses `3`, `1,4,9`, `1..10` (inclusive) or mixtures like `0..2,7`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let b = b.strip_prefix('=').unwrap_or(b);
            let (a, b): (u64, u64) = (
                a.trim().parse().with_context(|| format!("bad seed range {:?}", part))?,
                b.trim().parse().with_context(|| format!("bad seed range {:?}", part))?,
            );
            if b < a {
                bail!("empty seed range {:?}", part);
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(part.parse().with_context(|| format!("bad seed {:?}", part))?);
        }
    }
    if seeds.is_empty() {
        bail!("the seed list is empty");
    }
    Ok(seeds)
}

/// Worker count: `SEQCOMM_THREADS` if set, else the available cores.
pub fn worker_count() -> usize {
    std::env::var("SEQCOMM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Applies `f` to every item on up to `workers` threads. Results come back
/// in input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().expect("result slot").expect("every item ran")).collect()
}

/// Everything recorded about one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub method: String,
    pub seed: u64,
    #[serde(flatten)]
    pub run: RunSummary,
    /// Mean |Q(s,a,M) - Q(s,a,0)| on fresh episodes after training.
    pub held_out_message_gap: f64,
    /// Mean squared hypergradient norm over the first iterations.
    pub early_sq_hypergradient: f64,
    /// Mean squared hypergradient norm over the remaining iterations.
    pub late_sq_hypergradient: f64,
    pub cg_failures: usize,
    pub wall_clock_seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub summary: SeedSummary,
    pub metrics: Vec<RunMetrics>,
}

pub fn run_dir(out: &Path, method: Ablation, seed: u64) -> PathBuf {
    out.join(method.name()).join(format!("seed_{}", seed))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Early and late mean squared hypergradient norms.
pub fn hypergradient_trend(metrics: &[RunMetrics]) -> (f64, f64) {
    let split = EARLY_ITERATIONS.min(metrics.len());
    let sq = |m: &RunMetrics| m.hypergradient_norm * m.hypergradient_norm;
    (mean(metrics[..split].iter().map(sq)), mean(metrics[split..].iter().map(sq)))
}

struct Artifacts {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl Artifacts {
    fn create(dir: PathBuf, cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints")).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("effective_config.json"), config::to_json(cfg))?;
        let _ = fs::remove_file(dir.join("error.txt"));
        let metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        Ok(Self { dir, metrics })
    }

    fn row(&mut self, m: &RunMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, m)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }
}

/// Trains one configuration to completion, writing artifacts under
/// `out` when given. A failed run returns its partial record with
/// `summary.error` set; only artifact IO failures are errors.
pub fn train_seed(cfg: &TrainConfig, out: Option<&Path>) -> Result<RunRecord> {
    let start = Instant::now();
    let clock = || start.elapsed().as_secs_f64();
    let mut artifacts = match out {
        Some(o) => Some(Artifacts::create(run_dir(o, cfg.ablation, cfg.seed), cfg)?),
        None => None,
    };
    let mut trainer = Trainer::new(cfg.clone())?;
    let ckpt_dir = artifacts.as_ref().map(|a| a.dir.clone());
    let mut io_error: Option<anyhow::Error> = None;
    let result = {
        let mut observe = |e: Event<'_>| {
            let Some(a) = artifacts.as_mut() else { return };
            if io_error.is_some() {
                return;
            }
            let r = match e {
                Event::Iteration(m) => a.row(m),
                Event::Checkpoint { .. } => Ok(()),
            };
            if let Err(err) = r {
                io_error = Some(err);
            }
        };
        run_with_checkpoints(&mut trainer, &clock, &mut observe, ckpt_dir)
    };
    if let Some(e) = io_error {
        return Err(e);
    }
    let metrics = trainer.metrics().to_vec();
    let (early, late) = hypergradient_trend(&metrics);
    let error = result.err().map(|e| format!("{:#}", e));
    let held_out = if error.is_none() {
        trainer
            .held_out_message_gap(HELD_OUT_EPISODES, cfg.seed ^ HELD_OUT_SEED_SALT)
            .unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    let summary = SeedSummary {
        method: cfg.ablation.name().to_string(),
        seed: cfg.seed,
        run: RunSummary::from_metrics(&metrics, SUMMARY_WINDOW),
        held_out_message_gap: held_out,
        early_sq_hypergradient: early,
        late_sq_hypergradient: late,
        cg_failures: metrics.iter().filter(|m| m.cg_failed).count(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        error,
    };
    if let Some(mut a) = artifacts {
        a.metrics.flush()?;
        fs::write(a.dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        if let Some(e) = &summary.error {
            fs::write(a.dir.join("error.txt"), format!("{}\n", e))?;
        } else {
            checkpoint::save(&a.dir.join("final.ckpt"), &checkpoint::params_to_tensors(&trainer, trainer.params()))?;
        }
    }
    Ok(RunRecord { summary, metrics })
}

fn run_with_checkpoints(
    trainer: &mut Trainer,
    clock: &dyn Fn() -> f64,
    observe: &mut dyn FnMut(Event<'_>),
    dir: Option<PathBuf>,
) -> Result<()> {
    let every = trainer.config().checkpoint_every;
    while trainer.iteration() < trainer.config().iterations {
        let row = trainer.step(&clock)?.clone();
        observe(Event::Iteration(&row));
        let done = trainer.iteration();
        if every > 0 && done.is_multiple_of(every) {
            if let Some(d) = &dir {
                let path = d.join("checkpoints").join(format!("iter_{:06}.ckpt", done));
                checkpoint::save(&path, &checkpoint::params_to_tensors(trainer, trainer.params()))?;
            }
            observe(Event::Checkpoint { iteration: done, params: trainer.params() });
        }
    }
    Ok(())
}

/// Runs every `(method, seed)` job, in parallel up to `workers`.
pub fn train_many(base: &TrainConfig, jobs: &[(Ablation, u64)], out: Option<&Path>, workers: usize) -> Result<Vec<RunRecord>> {
    let results = parallel_map(jobs, workers, |&(method, seed)| {
        let cfg = TrainConfig { ablation: method, seed, ..base.clone() };
        train_seed(&cfg, out)
    });
    results.into_iter().collect()
}
