use alloc::vec::Vec;

use crate::env::Rollout;
use crate::error::usage;
use crate::nets::{argmax, Critic};
use crate::rng::{self, Rng};
use crate::Result;

/// Receiver `j`'s best utility with sender `i`'s message minus its best
/// utility with no message at all.
pub fn delta_q_critic(critic: &Critic, w: &[f64], obs_j: &[f64], msg_i: &[f64], sender: usize) -> Result<f64> {
    let s = critic.shapes();
    if obs_j.len() != s.obs || msg_i.len() != s.msg || sender >= s.agents {
        return Err(usage!("delta_q_critic input has the wrong shape"));
    }
    let width = s.utility_input();
    let mut inputs = alloc::vec![0.0; 2 * width];
    inputs[..s.obs].copy_from_slice(obs_j);
    inputs[width..width + s.obs].copy_from_slice(obs_j);
    let at = width + s.obs + sender * s.msg;
    inputs[at..at + s.msg].copy_from_slice(msg_i);
    let u = critic.utilities_eval(w, &inputs, 2);
    let (null, with) = u.split_at(s.actions);
    Ok(with[argmax(with)] - null[argmax(null)])
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Paired-rollout return gap between acting with and without a message.
///
/// Both branches of sample `k` start from a clone of `start` with the same
/// environment seed and the same policy seed (common random numbers), so
/// the estimate is exactly zero whenever the message changes nothing.
/// `policy(env, t, with_message, rng)` returns the joint action at step `t`.
pub fn delta_q_mc<E, P>(
    start: &E,
    mut policy: P,
    samples: usize,
    horizon: usize,
    gamma: f64,
    seed: u64,
) -> Result<McEstimate>
where
    E: Rollout,
    P: FnMut(&E, usize, bool, &mut Rng) -> Result<Vec<usize>>,
{
    if samples == 0 {
        return Err(usage!("Monte-Carlo estimate needs at least one sample"));
    }
    let mut gaps = Vec::with_capacity(samples);
    for k in 0..samples {
        let env_seed = rng::derive_seed(seed, 2 * k as u64);
        let policy_seed = rng::derive_seed(seed, 2 * k as u64 + 1);
        let mut ret = [0.0; 2];
        for (branch, with_message) in [(0, true), (1, false)] {
            let mut env = start.clone();
            env.reseed(env_seed);
            let mut prng = rng::seeded(policy_seed);
            let mut discount = 1.0;
            for t in 0..horizon {
                let a = policy(&env, t, with_message, &mut prng)?;
                let (r, done) = env.advance(&a)?;
                ret[branch] += discount * r;
                discount *= gamma;
                if done {
                    break;
                }
            }
        }
        gaps.push(ret[0] - ret[1]);
    }
    let n = samples as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = if samples > 1 {
        gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(McEstimate { mean, std_error: libm::sqrt(var / n), samples })
}

/// `(1 - beta) * mc + beta * critic`.
pub fn hybrid_delta_q(mc: f64, critic: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(usage!("annealing weight {} outside [0, 1]", beta));
    }
    Ok((1.0 - beta) * mc + beta * critic)
}

/// `min(t / warmup, 1)`; `1` when there is no warmup.
pub fn beta_schedule(t: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        (t as f64 / warmup as f64).min(1.0)
    }
}
