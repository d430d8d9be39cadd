use alloc::vec;
use alloc::vec::Vec;

use super::Rollout;
use crate::error::usage;
use crate::rng::{self, Rng};
use crate::{Error, Result};

const MAX_TABLE: usize = 10_000;

/// A fully enumerated Dec-POMDP. Joint actions are indexed little-endian:
/// agent 0's action is the least significant digit.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub states: usize,
    pub agents: usize,
    pub actions: usize,
    /// `rewards[s * joint + a]`.
    pub rewards: Vec<f64>,
    /// `transitions[(s * joint + a) * states + s']`, rows summing to one.
    pub transitions: Vec<f64>,
    pub initial_state: usize,
    /// Episode length; `0` means no horizon.
    pub horizon: usize,
}

impl ToySpec {
    /// Deterministic one-step game: every joint action ends the episode.
    pub fn one_shot(agents: usize, actions: usize, rewards: Vec<f64>) -> Self {
        let joint = rewards.len();
        Self {
            states: 1,
            agents,
            actions,
            rewards,
            transitions: vec![1.0; joint],
            initial_state: 0,
            horizon: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyEnv {
    spec: ToySpec,
    joint: usize,
    state: usize,
    steps: usize,
    done: bool,
    rng: Rng,
}

/// Validates a tabular spec and builds an environment from it.
pub fn make_toy_env(spec: ToySpec, seed: u64) -> Result<ToyEnv> {
    let joint = (spec.actions as u64)
        .checked_pow(spec.agents as u32)
        .and_then(|j| j.checked_mul(spec.states as u64))
        .filter(|&t| t <= MAX_TABLE as u64)
        .ok_or_else(|| {
            Error::Capability(alloc::format!(
                "{} states x {}^{} joint actions exceeds {} table entries",
                spec.states,
                spec.actions,
                spec.agents,
                MAX_TABLE
            ))
        })? as usize
        / spec.states.max(1);
    if spec.states == 0 || spec.agents == 0 || spec.actions == 0 {
        return Err(usage!("toy env needs at least one state, agent and action"));
    }
    if spec.rewards.len() != spec.states * joint {
        return Err(usage!("expected {} rewards, got {}", spec.states * joint, spec.rewards.len()));
    }
    if spec.transitions.len() != spec.states * joint * spec.states {
        return Err(usage!("transition table has the wrong size"));
    }
    for row in spec.transitions.chunks(spec.states) {
        let total: f64 = row.iter().sum();
        if row.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(usage!("transition rows must be distributions"));
        }
    }
    if spec.initial_state >= spec.states {
        return Err(usage!("initial state out of range"));
    }
    Ok(ToyEnv {
        state: spec.initial_state,
        spec,
        joint,
        steps: 0,
        done: false,
        rng: rng::seeded(seed),
    })
}

impl ToyEnv {
    pub fn spec(&self) -> &ToySpec {
        &self.spec
    }

    pub fn joint_actions(&self) -> usize {
        self.joint
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn set_state(&mut self, s: usize) -> Result<()> {
        if s >= self.spec.states {
            return Err(usage!("state {} out of range", s));
        }
        self.state = s;
        self.steps = 0;
        self.done = false;
        Ok(())
    }

    pub fn joint_index(&self, actions: &[usize]) -> Result<usize> {
        if actions.len() != self.spec.agents {
            return Err(usage!("expected {} actions, got {}", self.spec.agents, actions.len()));
        }
        let mut idx = 0;
        for &a in actions.iter().rev() {
            if a >= self.spec.actions {
                return Err(usage!("action {} out of range", a));
            }
            idx = idx * self.spec.actions + a;
        }
        Ok(idx)
    }

    pub fn reward(&self, s: usize, joint: usize) -> f64 {
        self.spec.rewards[s * self.joint + joint]
    }

    fn row(&self, s: usize, joint: usize) -> &[f64] {
        let n = self.spec.states;
        let at = (s * self.joint + joint) * n;
        &self.spec.transitions[at..at + n]
    }

    /// Infinite-horizon optimal joint Q table, `q[s * joint + a]`.
    pub fn value_iteration(&self, gamma: f64, tol: f64) -> Vec<f64> {
        let mut q = vec![0.0; self.spec.states * self.joint];
        loop {
            let v: Vec<f64> = q
                .chunks(self.joint)
                .map(|r| r.iter().cloned().fold(f64::MIN, f64::max))
                .collect();
            let next = self.backup(gamma, &v);
            let delta = next.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            q = next;
            if delta < tol {
                return q;
            }
        }
    }

    /// Optimal Q tables for `steps` remaining decisions, `q[t]` for `t` steps left.
    pub fn finite_horizon_q(&self, gamma: f64, steps: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.spec.states * self.joint]];
        for _ in 0..steps {
            let prev = out.last().unwrap();
            let v: Vec<f64> = prev
                .chunks(self.joint)
                .map(|r| r.iter().cloned().fold(f64::MIN, f64::max))
                .collect();
            out.push(self.backup(gamma, &v));
        }
        out
    }

    fn backup(&self, gamma: f64, v: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.spec.states * self.joint];
        for s in 0..self.spec.states {
            for a in 0..self.joint {
                let ev: f64 = self.row(s, a).iter().zip(v).map(|(p, v)| p * v).sum();
                q[s * self.joint + a] = self.reward(s, a) + gamma * ev;
            }
        }
        q
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<(f64, bool)> {
        if self.done {
            return Err(usage!("step called on a finished episode"));
        }
        let a = self.joint_index(actions)?;
        let r = self.reward(self.state, a);
        let u = rng::unit(&mut self.rng);
        let row = self.row(self.state, a);
        let mut acc = 0.0;
        let mut next = row.len() - 1;
        for (s, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = s;
                break;
            }
        }
        self.state = next;
        self.steps += 1;
        self.done = self.spec.horizon > 0 && self.steps >= self.spec.horizon;
        Ok((r, self.done))
    }
}

impl Rollout for ToyEnv {
    fn reseed(&mut self, seed: u64) {
        self.rng = rng::seeded(seed);
    }

    fn advance(&mut self, actions: &[usize]) -> Result<(f64, bool)> {
        self.step(actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix_game() -> ToySpec {
        // Two states; coordinating on action 1 in state 0 moves to the
        // rewarding state 1, which then decays back to 0.
        let joint = 4;
        let rewards = vec![0.0, 0.0, 0.0, 1.0, 2.0, 2.0, 2.0, 2.0];
        let mut transitions = Vec::new();
        for s in 0..2 {
            for a in 0..joint {
                let to1 = if s == 0 && a == 3 { 1.0 } else { 0.0 };
                transitions.extend([1.0 - to1, to1]);
            }
        }
        ToySpec { states: 2, agents: 2, actions: 2, rewards, transitions, initial_state: 0, horizon: 0 }
    }

    #[test]
    fn value_iteration_matches_closed_form() {
        // V(0) = 1 + g V(1), V(1) = 2 + g V(0).
        let env = make_toy_env(matrix_game(), 0).unwrap();
        let g = 0.9;
        let q = env.value_iteration(g, 1e-12);
        let v0 = (1.0 + 2.0 * g) / (1.0 - g * g);
        let v1 = 2.0 + g * v0;
        assert!((q[3] - v0).abs() < 1e-9);
        assert!((q[0] - g * v0).abs() < 1e-9);
        assert!((q[4] - v1).abs() < 1e-9);
    }

    #[test]
    fn one_shot_q_is_reward() {
        let env = make_toy_env(ToySpec::one_shot(2, 2, vec![1.0, -1.0, 0.5, 3.0]), 0).unwrap();
        let q = env.finite_horizon_q(0.9, 1);
        assert_eq!(q[1], vec![1.0, -1.0, 0.5, 3.0]);
        assert_eq!(env.joint_index(&[1, 1]).unwrap(), 3);
        assert_eq!(env.joint_index(&[1, 0]).unwrap(), 1);
    }

    #[test]
    fn oversized_spec_is_a_capability_error() {
        let spec = ToySpec::one_shot(9, 3, Vec::new());
        assert!(matches!(make_toy_env(spec, 0), Err(Error::Capability(_))));
    }

    #[test]
    fn stepping_follows_transitions() {
        let mut env = make_toy_env(matrix_game(), 0).unwrap();
        assert_eq!(env.step(&[1, 1]).unwrap(), (1.0, false));
        assert_eq!(env.state(), 1);
        assert_eq!(env.step(&[0, 0]).unwrap().0, 2.0);
        assert_eq!(env.state(), 0);
    }
}
