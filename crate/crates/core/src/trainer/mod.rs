//! The outer training loop: collect experience with the current policy,
//! fit the critic on model-generated targets, step the world model along
//! the implicit hypergradient plus auxiliary losses, update the target
//! critic.

mod buffer;
mod config;
mod policy;

pub use buffer::ReplayBuffer;
pub use config::{Ablation, TrainConfig};
pub use policy::{random_episode, run_episode, ActMode, Decision, EpisodeStats, Policy};

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bilevel::{
    hypergradient, inner_loop, AuxiliaryGrads, Batch, BilevelProblem, HospitalObjective, Hypergradient,
    HypergradientReport, Transition,
};
use crate::comm::OrderMode;
use crate::diffcore::norm;
use crate::error::{numerical, usage};
use crate::nets::{target_ema_update, Critic, Segment, WorldModel};
use crate::optim::{clip_norm, Optimizer};
use crate::rng::{self, Rng};
use crate::{Error, Result};

const INIT_STREAM: u64 = 0;
const ACT_STREAM: u64 = 1;
const EPISODE_STREAM: u64 = 2;

/// Seconds since an arbitrary origin.
pub trait Clock {
    fn now(&self) -> f64;
}

impl<F: Fn() -> f64> Clock for F {
    fn now(&self) -> f64 {
        self()
    }
}

/// A clock that never advances.
pub struct StoppedClock;

impl Clock for StoppedClock {
    fn now(&self) -> f64 {
        0.0
    }
}

/// World-model, critic and target-critic parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub theta: Vec<f64>,
    pub w: Vec<f64>,
    pub target: Vec<f64>,
}

/// One row per outer iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub iteration: usize,
    pub episode_reward: f64,
    pub severity_improvement: f64,
    pub model_loss: f64,
    pub true_loss: f64,
    pub value_aware_loss: f64,
    pub influence_loss: f64,
    pub awareness_loss: f64,
    pub prediction_loss: f64,
    /// Norm of the implicit hypergradient of the true loss.
    pub hypergradient_norm: f64,
    /// Norm of the combined outer gradient before clipping.
    pub outer_grad_norm: f64,
    pub direct_norm: f64,
    pub indirect_norm: f64,
    pub cg_residual: f64,
    pub cg_iterations: usize,
    /// Conjugate gradient gave up; only the direct term was used.
    pub cg_failed: bool,
    pub inner_entry_grad_norm: f64,
    pub inner_grad_norm: f64,
    pub inner_warning: bool,
    /// Mean `|Q(s,a,M) − Q(s,a,0)|` on the model batch.
    pub message_gap: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub wall_clock: f64,
}

/// Notifications emitted while training.
#[derive(Debug)]
pub enum Event<'a> {
    Iteration(&'a RunMetrics),
    Checkpoint { iteration: usize, params: &'a Params },
}

/// Aggregates of a finished run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    pub final_reward: f64,
    pub mean_last_reward: f64,
    pub mean_last_severity_improvement: f64,
    pub final_model_loss: f64,
    pub final_true_loss: f64,
    pub final_value_aware_loss: f64,
    pub final_influence_loss: f64,
    pub final_awareness_loss: f64,
    pub final_prediction_loss: f64,
    pub final_message_gap: f64,
}

impl RunSummary {
    /// Summary over the last `window` rows.
    pub fn from_metrics(metrics: &[RunMetrics], window: usize) -> Self {
        let Some(last) = metrics.last() else {
            return Self::default();
        };
        let tail = &metrics[metrics.len().saturating_sub(window.max(1))..];
        let mean = |f: fn(&RunMetrics) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
        Self {
            iterations: metrics.len(),
            final_reward: last.episode_reward,
            mean_last_reward: mean(|m| m.episode_reward),
            mean_last_severity_improvement: mean(|m| m.severity_improvement),
            final_model_loss: last.model_loss,
            final_true_loss: last.true_loss,
            final_value_aware_loss: last.value_aware_loss,
            final_influence_loss: last.influence_loss,
            final_awareness_loss: last.awareness_loss,
            final_prediction_loss: last.prediction_loss,
            final_message_gap: last.message_gap,
        }
    }
}

/// Mean and spread of evaluation episodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_severity_improvement: f64,
}

impl EvalSummary {
    fn from_stats(stats: &[EpisodeStats]) -> Self {
        let n = stats.len() as f64;
        let mean = stats.iter().map(|s| s.reward).sum::<f64>() / n;
        let var = stats.iter().map(|s| (s.reward - mean) * (s.reward - mean)).sum::<f64>() / n;
        Self {
            episodes: stats.len(),
            mean_reward: mean,
            std_reward: libm::sqrt(var),
            mean_severity_improvement: stats.iter().map(|s| s.severity_improvement).sum::<f64>() / n,
        }
    }
}

/// Training state. Metrics of completed iterations survive a failed step.
pub struct Trainer {
    cfg: TrainConfig,
    model: WorldModel,
    critic: Critic,
    params: Params,
    inner_opt: Optimizer,
    outer_opt: Optimizer,
    buffer: ReplayBuffer,
    rng: Rng,
    metrics: Vec<RunMetrics>,
}

fn networks(cfg: &TrainConfig) -> (WorldModel, Critic) {
    let shapes = cfg.shapes();
    let model = WorldModel::new(shapes, cfg.ablation.has_comm()).with_refine_scale(cfg.refine_scale);
    (model, Critic::new(shapes))
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, critic) = networks(&cfg);
        let mut init = rng::seeded(rng::derive_seed(cfg.seed, INIT_STREAM));
        let theta = model.init(&mut init);
        let w = critic.init(&mut init);
        let params = Params { theta, target: w.clone(), w };
        Self::with_params(cfg, params)
    }

    /// Resumes from saved parameters with fresh optimizer state and buffer.
    pub fn with_params(cfg: TrainConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let (model, critic) = networks(&cfg);
        if params.theta.len() != model.len() || params.w.len() != critic.len() || params.target.len() != critic.len() {
            return Err(usage!("parameters do not match the configured networks"));
        }
        Ok(Self {
            inner_opt: Optimizer::new(cfg.inner_optimizer, cfg.lr_w, critic.len()),
            outer_opt: Optimizer::new(cfg.outer_optimizer, cfg.lr_theta, model.len()),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            rng: rng::seeded(rng::derive_seed(cfg.seed, ACT_STREAM)),
            metrics: Vec::new(),
            cfg,
            model,
            critic,
            params,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &WorldModel {
        &self.model
    }

    pub fn critic(&self) -> &Critic {
        &self.critic
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Replaces the parameters, keeping metrics, buffer and optimizer state.
    pub fn set_params(&mut self, params: Params) -> Result<()> {
        if params.theta.len() != self.model.len()
            || params.w.len() != self.critic.len()
            || params.target.len() != self.critic.len()
        {
            return Err(usage!("parameters do not match the configured networks"));
        }
        self.params = params;
        Ok(())
    }

    pub fn metrics(&self) -> &[RunMetrics] {
        &self.metrics
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn iteration(&self) -> usize {
        self.metrics.len()
    }

    /// Named parameter segments: world model first, then critic.
    pub fn manifest(&self) -> (Vec<Segment>, Vec<Segment>) {
        (self.model.manifest(), self.critic.manifest())
    }

    pub fn policy(&self) -> Policy<'_> {
        Policy {
            cfg: &self.cfg,
            model: &self.model,
            critic: &self.critic,
            theta: &self.params.theta,
            w: &self.params.w,
        }
    }

    fn episode_seed(&self, index: u64) -> u64 {
        rng::derive_seed(rng::derive_seed(self.cfg.seed, EPISODE_STREAM), index)
    }

    /// Collects `episodes_per_iteration` episodes for iteration `t` into
    /// the buffer and returns their mean statistics.
    pub fn collect(&mut self, t: usize) -> Result<EpisodeStats> {
        let mode = ActMode {
            epsilon: self.cfg.epsilon(t),
            beta: self.cfg.beta(t),
            order: OrderMode::Stochastic { temperature: self.cfg.gumbel_temperature },
        };
        let count = self.cfg.episodes_per_iteration;
        let mut total = EpisodeStats::default();
        for e in 0..count {
            let seed = self.episode_seed((t * count + e) as u64);
            let policy = Policy {
                cfg: &self.cfg,
                model: &self.model,
                critic: &self.critic,
                theta: &self.params.theta,
                w: &self.params.w,
            };
            let buffer = &mut self.buffer;
            let stats = run_episode(&policy, seed, mode, &mut self.rng, |tr| buffer.push(tr))?;
            total.reward += stats.reward;
            total.severity_improvement += stats.severity_improvement;
            total.steps += stats.steps;
        }
        total.reward /= count as f64;
        total.severity_improvement /= count as f64;
        Ok(total)
    }

    /// One outer iteration: collect, inner loop, hypergradient plus
    /// auxiliary gradients, world-model step, target update.
    pub fn step(&mut self, clock: &dyn Clock) -> Result<&RunMetrics> {
        let t = self.iteration();
        let episode = self.collect(t)?;
        let cfg = &self.cfg;
        let shapes = cfg.shapes();
        let data = Batch::new(&self.buffer.sample(cfg.batch_size, &mut self.rng)?, &shapes)?;
        let real = Batch::new(&self.buffer.sample(cfg.batch_size, &mut self.rng)?, &shapes)?;
        let obj = HospitalObjective::new(
            &self.model,
            &self.critic,
            &self.params.theta,
            &self.params.target,
            data,
            real,
            cfg.loss_config(),
        )?;
        let inner = inner_loop(&obj, &self.params.w, cfg.k_inner, &mut self.inner_opt, cfg.clip)?;
        let w = inner.w;
        let outer = outer_gradient(&obj, &w, cfg)?;
        let (hyper, aux) = (&outer.hyper, &outer.aux);
        let row = RunMetrics {
            iteration: t,
            episode_reward: episode.reward,
            severity_improvement: episode.severity_improvement,
            model_loss: obj.model_loss(&w)?,
            true_loss: hyper.report.true_loss,
            value_aware_loss: aux.value_aware,
            influence_loss: aux.influence,
            awareness_loss: obj.awareness_loss(&w)?,
            prediction_loss: aux.prediction,
            hypergradient_norm: norm(&hyper.grad),
            outer_grad_norm: outer.pre_clip_norm,
            direct_norm: hyper.report.direct_norm,
            indirect_norm: hyper.report.indirect_norm,
            cg_residual: hyper.report.cg_residual,
            cg_iterations: hyper.report.cg_iterations,
            cg_failed: outer.cg_failed,
            inner_entry_grad_norm: inner.entry_grad_norm,
            inner_grad_norm: inner.grad_norm,
            inner_warning: inner.warning,
            message_gap: obj.message_gap(&w)?,
            beta: cfg.beta(t),
            epsilon: cfg.epsilon(t),
            wall_clock: clock.now(),
        };
        let grad = outer.grad;
        drop(obj);
        self.outer_opt.step(&mut self.params.theta, &grad);
        target_ema_update(&mut self.params.target, &w, self.cfg.tau_ema)?;
        self.params.w = w;
        self.metrics.push(row);
        Ok(self.metrics.last().expect("row just pushed"))
    }

    /// Steps until `iterations` rows exist, reporting every row and a
    /// checkpoint every `checkpoint_every` iterations.
    pub fn run(&mut self, clock: &dyn Clock, observer: &mut dyn FnMut(Event<'_>)) -> Result<()> {
        while self.iteration() < self.cfg.iterations {
            self.step(clock)?;
            observer(Event::Iteration(self.metrics.last().expect("row just pushed")));
            let done = self.iteration();
            if self.cfg.checkpoint_every > 0 && done.is_multiple_of(self.cfg.checkpoint_every) {
                observer(Event::Checkpoint { iteration: done, params: &self.params });
            }
        }
        Ok(())
    }

    /// Greedy episodes with deterministic ordering.
    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<EvalSummary> {
        if episodes == 0 {
            return Err(usage!("evaluation needs at least one episode"));
        }
        let policy = self.policy();
        let mut rng = rng::seeded(seed);
        let stats = (0..episodes)
            .map(|e| run_episode(&policy, rng::derive_seed(seed, e as u64), ActMode::greedy(), &mut rng, |_| {}))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSummary::from_stats(&stats))
    }

    /// Mean `|Q(s,a,M) − Q(s,a,0)|` over transitions of fresh greedy
    /// episodes that training never saw.
    pub fn held_out_message_gap(&self, episodes: usize, seed: u64) -> Result<f64> {
        let policy = self.policy();
        let mut rng = rng::seeded(seed);
        let mut held: Vec<Transition> = Vec::new();
        for e in 0..episodes.max(1) {
            let env_seed = rng::derive_seed(seed ^ 0x5eed, e as u64);
            run_episode(&policy, env_seed, ActMode::greedy(), &mut rng, |t| held.push(t))?;
        }
        let refs: Vec<&Transition> = held.iter().collect();
        let shapes = self.cfg.shapes();
        let obj = HospitalObjective::new(
            &self.model,
            &self.critic,
            &self.params.theta,
            &self.params.target,
            Batch::new(&refs, &shapes)?,
            Batch::new(&refs[..1], &shapes)?,
            self.cfg.loss_config(),
        )?;
        obj.message_gap(&self.params.w)
    }
}

/// Combined world-model gradient of one outer step.
#[derive(Clone, Debug)]
pub struct OuterGradient {
    /// Hypergradient plus auxiliary gradients, clipped.
    pub grad: Vec<f64>,
    pub pre_clip_norm: f64,
    pub hyper: Hypergradient,
    /// Conjugate gradient gave up; `hyper` holds the direct term only.
    pub cg_failed: bool,
    pub aux: AuxiliaryGrads,
}

/// Implicit hypergradient of the true loss at the inner solution `w`
/// plus the weighted auxiliary gradients, clipped to `cfg.clip`.
pub fn outer_gradient(obj: &HospitalObjective<'_>, w: &[f64], cfg: &TrainConfig) -> Result<OuterGradient> {
    let (hyper, cg_failed) = match hypergradient(obj, w, cfg.cg_damping, cfg.k_cg) {
        Ok(h) => (h, false),
        Err(Error::IllConditioned(_)) => {
            let (true_loss, _, direct) = obj.outer_value_grads(w)?;
            let report = HypergradientReport { true_loss, direct_norm: norm(&direct), ..HypergradientReport::default() };
            (Hypergradient { grad: direct, report }, true)
        }
        Err(e) => return Err(e),
    };
    let aux = obj.auxiliary(w, cfg.aux_weights())?;
    let mut grad: Vec<f64> = hyper.grad.iter().zip(&aux.grad).map(|(a, b)| a + b).collect();
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(numerical!("outer gradient is not finite"));
    }
    let pre_clip_norm = clip_norm(&mut grad, cfg.clip);
    Ok(OuterGradient { grad, pre_clip_norm, hyper, cg_failed, aux })
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: Params,
    pub metrics: Vec<RunMetrics>,
}

/// Runs a full training from `cfg`.
pub fn train(cfg: TrainConfig, clock: &dyn Clock, observer: &mut dyn FnMut(Event<'_>)) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(cfg)?;
    trainer.run(clock, observer)?;
    Ok(TrainOutput { params: trainer.params, metrics: trainer.metrics })
}

/// Mean statistics of a uniformly random policy.
pub fn random_baseline(env: &crate::env::EnvConfig, episodes: usize, seed: u64) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(usage!("baseline needs at least one episode"));
    }
    let mut rng = rng::seeded(seed);
    let stats = (0..episodes)
        .map(|e| random_episode(env, rng::derive_seed(seed, e as u64), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary::from_stats(&stats))
}
