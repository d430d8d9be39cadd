use alloc::vec;
use alloc::vec::Vec;

use super::{Ablation, TrainConfig};
use crate::bilevel::Transition;
use crate::comm::{
    delta_q_critic, delta_q_mc, guidance_potential, hybrid_delta_q, priority_order, sequential_select, JointScorer,
    OrderMode, PriorityOrder, UtilityTable, Visibility,
};
use crate::env::{HospitalEnv, Rollout};
use crate::nets::{Critic, WorldModel};
use crate::rng::{self, Rng};
use crate::Result;

/// One joint decision with everything the replay buffer keeps about it.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub actions: Vec<usize>,
    pub masks: Vec<usize>,
    /// `agents x msg`, flattened.
    pub messages: Vec<f64>,
    pub dq_hat: Vec<f64>,
    pub order: Vec<usize>,
}

/// How a decision is made.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActMode {
    pub epsilon: f64,
    /// Weight on the critic's decision-impact estimate versus the
    /// Monte-Carlo one.
    pub beta: f64,
    pub order: OrderMode,
}

impl ActMode {
    /// Greedy, deterministic ordering, critic estimates only.
    pub fn greedy() -> Self {
        Self { epsilon: 0.0, beta: 1.0, order: OrderMode::Deterministic }
    }
}

/// The acting side of the method under fixed parameters.
pub struct Policy<'a> {
    pub cfg: &'a TrainConfig,
    pub model: &'a WorldModel,
    pub critic: &'a Critic,
    pub theta: &'a [f64],
    pub w: &'a [f64],
}

impl Policy<'_> {
    fn agents(&self) -> usize {
        self.critic.shapes().agents
    }

    fn flat_obs(obs: &[Vec<f64>]) -> Vec<f64> {
        obs.iter().flatten().copied().collect()
    }

    pub fn base_messages(&self, obs: &[Vec<f64>]) -> Vec<f64> {
        self.model.encode_eval(self.theta, &Self::flat_obs(obs), obs.len())
    }

    /// Per-sender critic estimate: mean over receivers of the best-utility
    /// gain from that sender's base message.
    pub fn critic_delta_q(&self, obs: &[Vec<f64>], base: &[f64]) -> Result<Vec<f64>> {
        let n = self.agents();
        let d = self.critic.shapes().msg;
        let mut out = vec![0.0; n];
        if n < 2 {
            return Ok(out);
        }
        for (i, o) in out.iter_mut().enumerate() {
            let msg = &base[i * d..(i + 1) * d];
            let mut total = 0.0;
            for (_, obs_j) in obs.iter().enumerate().filter(|&(j, _)| j != i) {
                total += delta_q_critic(self.critic, self.w, obs_j, msg, i)?;
            }
            *o = total / (n - 1) as f64;
        }
        Ok(out)
    }

    /// Monte-Carlo estimate per sender from `env`: paired rollouts of the
    /// exploratory policy with and without that sender's message.
    pub fn mc_delta_q(&self, env: &HospitalEnv, seed: u64) -> Result<Vec<f64>> {
        let n = self.agents();
        let d = self.critic.shapes().msg;
        let mut out = vec![0.0; n];
        if !self.cfg.ablation.has_comm() || n < 2 {
            return Ok(out);
        }
        for (i, o) in out.iter_mut().enumerate() {
            let policy = |e: &HospitalEnv, _t: usize, with: bool, rng: &mut Rng| -> Result<Vec<usize>> {
                let obs = e.observations();
                let mut msgs = self.base_messages(&obs);
                if !with {
                    msgs[i * d..(i + 1) * d].iter_mut().for_each(|x| *x = 0.0);
                }
                let table = UtilityTable::from_critic(self.critic, self.w, &obs, &msgs)?;
                let scorer = JointScorer::from_critic(self.critic, self.w, &e.global_state());
                let order = PriorityOrder::identity(n);
                let sel = sequential_select(&table, &scorer, &order, Visibility::All, self.cfg.mc_epsilon, rng);
                Ok(sel.actions)
            };
            let est = delta_q_mc(
                env,
                policy,
                self.cfg.mc_samples,
                self.cfg.mc_horizon,
                self.cfg.gamma,
                rng::derive_seed(seed, i as u64),
            )?;
            *o = est.mean;
        }
        Ok(out)
    }

    /// Messages, ordering and sequential selection at the current state.
    /// `mc` holds Monte-Carlo estimates to blend in while `beta < 1`.
    pub fn act(&self, env: &HospitalEnv, mc: Option<&[f64]>, mode: ActMode, rng: &mut Rng) -> Result<Decision> {
        let n = self.agents();
        let shapes = self.critic.shapes();
        let obs = env.observations();
        let ablation = self.cfg.ablation;
        let (messages, dq_hat) = if ablation.has_comm() {
            let base = self.base_messages(&obs);
            let critic = self.critic_delta_q(&obs, &base)?;
            let dq = match mc {
                Some(mc) if mode.beta < 1.0 => {
                    mc.iter().zip(&critic).map(|(&m, &c)| hybrid_delta_q(m, c, mode.beta)).collect::<Result<_>>()?
                }
                _ => critic,
            };
            (self.model.refine_eval(self.theta, &base, &dq, n), dq)
        } else {
            (vec![0.0; n * shapes.msg], vec![0.0; n])
        };
        let table = UtilityTable::from_critic(self.critic, self.w, &obs, &messages)?;
        let scorer = JointScorer::from_critic(self.critic, self.w, &env.global_state());
        let order = match ablation {
            Ablation::NoComm | Ablation::ParallelMsgs => PriorityOrder::identity(n),
            Ablation::NoGp => {
                let selfish: Vec<f64> = (0..n).map(|i| table.best(i, 0).1).collect();
                priority_order(&selfish, mode.order, rng)?
            }
            _ => {
                let gp = guidance_potential(&table, &scorer, self.cfg.gp_samples, rng);
                priority_order(&gp, mode.order, rng)?
            }
        };
        let sel = sequential_select(&table, &scorer, &order, ablation.visibility(), mode.epsilon, rng);
        Ok(Decision { actions: sel.actions, masks: sel.masks, messages, dq_hat, order: order.agents().to_vec() })
    }
}

/// Totals of one episode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeStats {
    pub reward: f64,
    pub severity_improvement: f64,
    pub steps: usize,
}

/// Runs one episode from `HospitalEnv::reset(env_seed)`, passing each
/// transition to `sink`. Monte-Carlo estimates are taken once at the
/// start state when `mode.beta < 1`.
pub fn run_episode(
    policy: &Policy<'_>,
    env_seed: u64,
    mode: ActMode,
    rng: &mut Rng,
    mut sink: impl FnMut(Transition),
) -> Result<EpisodeStats> {
    let mut env = HospitalEnv::reset(policy.cfg.env.clone(), env_seed)?;
    let mc = if mode.beta < 1.0 && policy.cfg.ablation.has_comm() {
        Some(policy.mc_delta_q(&env, rng::derive_seed(env_seed, 0x6d63))?)
    } else {
        None
    };
    let mut stats = EpisodeStats::default();
    while !env.is_done() {
        let state = env.global_state();
        let d = policy.act(&env, mc.as_deref(), mode, rng)?;
        let out = env.step(&d.actions)?;
        stats.reward += out.reward;
        stats.steps += 1;
        sink(Transition {
            state,
            actions: d.actions,
            reward: out.reward,
            next_state: env.global_state(),
            done: env.resolved(),
            dq_hat: d.dq_hat,
            masks: d.masks,
            messages: d.messages,
        });
    }
    stats.severity_improvement = env.severity_improvement();
    Ok(stats)
}

/// One episode of uniformly random joint actions.
pub fn random_episode(cfg: &crate::env::EnvConfig, env_seed: u64, rng: &mut Rng) -> Result<EpisodeStats> {
    let mut env = HospitalEnv::reset(cfg.clone(), env_seed)?;
    let mut stats = EpisodeStats::default();
    while !env.is_done() {
        let a: Vec<usize> = (0..cfg.agents).map(|_| rng::index(rng, crate::env::NUM_ACTIONS)).collect();
        let (r, _) = env.advance(&a)?;
        stats.reward += r;
        stats.steps += 1;
    }
    stats.severity_improvement = env.severity_improvement();
    Ok(stats)
}
