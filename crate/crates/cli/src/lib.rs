//! Command-line companion of `seqcomm-core`: configuration files,
//! checkpoints, multi-seed runs, reports and the oracle self-test.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod runner;
pub mod selftest;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use seqcomm_core::trainer::{random_baseline, Ablation, TrainConfig, Trainer};
use serde::Serialize;

use crate::runner::{run_dir, train_many, RunRecord};

/// Episodes used for the random-policy reference.
pub const BASELINE_EPISODES: usize = 200;
/// Seed of the random-policy reference episodes.
pub const BASELINE_SEED: u64 = 0x7261_6e64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Ablate,
    Compare,
    Selftest,
}

/// A fully resolved invocation.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub mode: Mode,
    pub config: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub ablation: Option<Ablation>,
    pub iterations: Option<usize>,
    pub episodes: usize,
    pub workers: usize,
}

impl Invocation {
    /// Configuration file merged with the command-line overrides.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = config::load(self.config.as_deref())?;
        if let Some(a) = self.ablation {
            cfg.ablation = a;
        }
        if let Some(n) = self.iterations {
            cfg.iterations = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one invocation; `Ok(false)` means the work finished but some run
/// or check failed.
pub fn run(inv: &Invocation) -> Result<bool> {
    match inv.mode {
        Mode::Train => train(inv),
        Mode::Eval => eval(inv),
        Mode::Compare => compare(inv),
        Mode::Ablate => ablate(inv),
        Mode::Selftest => selftest(inv),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn report_runs(records: &[RunRecord]) -> bool {
    let mut ok = true;
    for r in records {
        let s = &r.summary;
        match &s.error {
            None => println!(
                "{} seed {}: last-{} reward {:.3}, severity improvement {:.3}, {:.1}s",
                s.method,
                s.seed,
                runner::SUMMARY_WINDOW,
                s.run.mean_last_reward,
                s.run.mean_last_severity_improvement,
                s.wall_clock_seconds
            ),
            Some(e) => {
                ok = false;
                eprintln!("{} seed {} failed after {} iterations: {}", s.method, s.seed, r.metrics.len(), e);
            }
        }
    }
    ok
}

fn train(inv: &Invocation) -> Result<bool> {
    let cfg = inv.train_config()?;
    let jobs: Vec<(Ablation, u64)> = inv.seeds.iter().map(|&s| (cfg.ablation, s)).collect();
    let records = train_many(&cfg, &jobs, Some(&inv.out), inv.workers)?;
    Ok(report_runs(&records))
}

#[derive(Serialize)]
struct EvalReport {
    method: String,
    seed: u64,
    episodes: usize,
    mean_reward: f64,
    std_reward: f64,
    mean_severity_improvement: f64,
    random_mean_reward: f64,
    random_mean_severity_improvement: f64,
}

/// Restores a trained run from its directory.
pub fn load_run(dir: &Path) -> Result<Trainer> {
    let cfg = config::load(Some(&dir.join("effective_config.json")))?;
    let mut trainer = Trainer::new(cfg)?;
    let tensors = checkpoint::load(&dir.join("final.ckpt"))?;
    let params = checkpoint::tensors_to_params(&trainer, &tensors)?;
    trainer.set_params(params)?;
    Ok(trainer)
}

fn eval(inv: &Invocation) -> Result<bool> {
    let method = match inv.ablation {
        Some(a) => a,
        None => inv.train_config()?.ablation,
    };
    for &seed in &inv.seeds {
        let dir = run_dir(&inv.out, method, seed);
        let trainer = load_run(&dir).with_context(|| format!("no trained run in {}", dir.display()))?;
        let greedy = trainer.evaluate(inv.episodes, seed)?;
        let random = random_baseline(&trainer.config().env, inv.episodes, seed)?;
        let report = EvalReport {
            method: method.name().to_string(),
            seed,
            episodes: inv.episodes,
            mean_reward: greedy.mean_reward,
            std_reward: greedy.std_reward,
            mean_severity_improvement: greedy.mean_severity_improvement,
            random_mean_reward: random.mean_reward,
            random_mean_severity_improvement: random.mean_severity_improvement,
        };
        write(&dir.join("eval.json"), &serde_json::to_string_pretty(&report)?)?;
        println!(
            "{} seed {}: reward {:.3} ± {:.3} (random {:.3}), severity improvement {:.3} (random {:.3})",
            report.method,
            seed,
            report.mean_reward,
            report.std_reward,
            report.random_mean_reward,
            report.mean_severity_improvement,
            report.random_mean_severity_improvement
        );
    }
    Ok(true)
}

fn compare(inv: &Invocation) -> Result<bool> {
    let cfg = inv.train_config()?;
    let methods = [Ablation::Full, Ablation::NoComm];
    let jobs: Vec<(Ablation, u64)> =
        methods.iter().flat_map(|&m| inv.seeds.iter().map(move |&s| (m, s))).collect();
    let records = train_many(&cfg, &jobs, Some(&inv.out), inv.workers)?;
    let ok = report_runs(&records);
    let random = random_baseline(&cfg.env, BASELINE_EPISODES, BASELINE_SEED)?;
    let stats: Vec<_> = methods.iter().map(|&m| report::method_stats(m, &records)).collect();
    write(&inv.out.join("compare_series.csv"), &report::series_csv(&records))?;
    write(
        &inv.out.join("compare_summary.csv"),
        &report::compare_csv(&stats, random.mean_reward, random.mean_severity_improvement),
    )?;
    for s in &stats {
        println!(
            "{}: reward {:.3} ± {:.3}, severity improvement {:.3} ± {:.3} over {} seeds",
            s.method, s.reward_mean, s.reward_std, s.severity_mean, s.severity_std, s.seeds
        );
    }
    println!("random: reward {:.3}, severity improvement {:.3}", random.mean_reward, random.mean_severity_improvement);
    Ok(ok)
}

fn ablate(inv: &Invocation) -> Result<bool> {
    let cfg = inv.train_config()?;
    let jobs: Vec<(Ablation, u64)> =
        Ablation::GRID.iter().flat_map(|&m| inv.seeds.iter().map(move |&s| (m, s))).collect();
    let records = train_many(&cfg, &jobs, Some(&inv.out), inv.workers)?;
    let ok = report_runs(&records);
    let rows = report::ablation_rows(&records);
    write(&inv.out.join("ablation.csv"), &report::ablation_csv(&rows))?;
    for r in &rows {
        println!(
            "{:<14} reward {:>8.3} ± {:.3}  delta {:>+8.3} ({:+.1}%)",
            r.ablation, r.reward_mean, r.reward_std, r.delta_reward, r.delta_percent
        );
    }
    Ok(ok)
}

fn selftest(inv: &Invocation) -> Result<bool> {
    let checks = selftest::run_all(|suite, checks, secs| {
        for c in checks {
            println!(
                "[{}] criterion {:>2} {}: {} ({})",
                if c.passed { "PASS" } else { "FAIL" },
                c.criterion,
                suite.title,
                c.name,
                c.detail
            );
        }
        println!("      {} finished in {:.1}s", suite.title, secs);
    });
    write(&inv.out.join("selftest.json"), &serde_json::to_string_pretty(&checks)?)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        println!("{} of {} checks failed", failed, checks.len());
    } else {
        println!("all {} checks passed", checks.len());
    }
    Ok(failed == 0)
}

/// Checks that a seed list is usable for a mode.
pub fn check_seeds(seeds: &[u64]) -> Result<()> {
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        bail!("the seed list repeats a seed");
    }
    Ok(())
}
