//! Aggregation across seeds: comparison series and tables, ablation
//! deltas, simple statistics.

use std::fmt::Write as _;

use seqcomm_core::trainer::Ablation;
use serde::{Deserialize, Serialize};

use crate::runner::RunRecord;

/// Sample mean and standard deviation (n - 1 denominator; 0 for n = 1).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// One-sided sign-test p-value: probability of at least `wins` successes
/// in `trials` fair coin flips.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    let total = 2f64.powi(trials as i32);
    (wins..=trials).map(|k| binomial(trials, k)).sum::<f64>() / total
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// CSV rows `iteration,method,seed,episode_reward,severity_improvement`.
pub fn series_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("iteration,method,seed,episode_reward,severity_improvement\n");
    for r in records {
        for m in &r.metrics {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                m.iteration, r.summary.method, r.summary.seed, m.episode_reward, m.severity_improvement
            );
        }
    }
    out
}

/// Per-method aggregate of last-window statistics across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: String,
    pub seeds: usize,
    pub failed: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub severity_mean: f64,
    pub severity_std: f64,
}

pub fn method_stats(method: Ablation, records: &[RunRecord]) -> MethodStats {
    let mine: Vec<&RunRecord> = records.iter().filter(|r| r.summary.method == method.name()).collect();
    let ok: Vec<&&RunRecord> = mine.iter().filter(|r| r.summary.error.is_none()).collect();
    let rewards: Vec<f64> = ok.iter().map(|r| r.summary.run.mean_last_reward).collect();
    let severities: Vec<f64> = ok.iter().map(|r| r.summary.run.mean_last_severity_improvement).collect();
    let (reward_mean, reward_std) = mean_std(&rewards);
    let (severity_mean, severity_std) = mean_std(&severities);
    MethodStats {
        method: method.name().to_string(),
        seeds: mine.len(),
        failed: mine.len() - ok.len(),
        reward_mean,
        reward_std,
        severity_mean,
        severity_std,
    }
}

/// Comparison table with a random-policy reference row.
pub fn compare_csv(stats: &[MethodStats], random_reward: f64, random_severity: f64) -> String {
    let mut out = String::from(
        "method,seeds,failed,reward_mean,reward_std,severity_mean,severity_std,reward_improvement_over_random\n",
    );
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.method,
            s.seeds,
            s.failed,
            s.reward_mean,
            s.reward_std,
            s.severity_mean,
            s.severity_std,
            s.reward_mean - random_reward
        );
    }
    let _ = writeln!(out, "random,,,{},,{},,0", random_reward, random_severity);
    out
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: String,
    pub seeds: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub severity_mean: f64,
    /// Reward mean minus the full method's.
    pub delta_reward: f64,
    /// `delta_reward` relative to the magnitude of the full method's reward, in percent.
    pub delta_percent: f64,
}

pub fn ablation_rows(records: &[RunRecord]) -> Vec<AblationRow> {
    let full = method_stats(Ablation::Full, records);
    Ablation::GRID
        .iter()
        .map(|&a| {
            let s = method_stats(a, records);
            let delta = s.reward_mean - full.reward_mean;
            AblationRow {
                ablation: a.name().to_string(),
                seeds: s.seeds,
                reward_mean: s.reward_mean,
                reward_std: s.reward_std,
                severity_mean: s.severity_mean,
                delta_reward: delta,
                delta_percent: 100.0 * delta / full.reward_mean.abs().max(f64::MIN_POSITIVE),
            }
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("ablation,seeds,reward_mean,reward_std,severity_mean,delta_reward,delta_percent\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.ablation, r.seeds, r.reward_mean, r.reward_std, r.severity_mean, r.delta_reward, r.delta_percent
        );
    }
    out
}
