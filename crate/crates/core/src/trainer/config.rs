use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bilevel::LossConfig;
use crate::comm::Visibility;
use crate::env::EnvConfig;
use crate::error::usage;
use crate::nets::{Shapes, ValueMode};
use crate::optim::OptimizerKind;
use crate::Result;

/// Training variants: the full method, four component ablations and the
/// no-communication baseline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Value-aware loss disabled.
    NoVa,
    /// Every agent sees every other agent's message and all act at once.
    ParallelMsgs,
    /// Ordering by each agent's own best utility instead of guidance
    /// potential.
    NoGp,
    /// Influence loss disabled.
    NoInfluence,
    /// No encoder or refinement net, zero messages everywhere, no
    /// communication losses: the optimal-model-design baseline.
    NoComm,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoVa,
        Ablation::ParallelMsgs,
        Ablation::NoGp,
        Ablation::NoInfluence,
        Ablation::NoComm,
    ];

    /// The component-ablation grid, in table order.
    pub const GRID: [Ablation; 5] =
        [Ablation::Full, Ablation::NoVa, Ablation::ParallelMsgs, Ablation::NoGp, Ablation::NoInfluence];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoVa => "no_va",
            Ablation::ParallelMsgs => "parallel_msgs",
            Ablation::NoGp => "no_gp",
            Ablation::NoInfluence => "no_influence",
            Ablation::NoComm => "no_comm",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == name)
            .ok_or_else(|| usage!("unknown ablation '{}'", name))
    }

    pub fn has_comm(self) -> bool {
        self != Ablation::NoComm
    }

    pub fn visibility(self) -> Visibility {
        if self == Ablation::ParallelMsgs {
            Visibility::All
        } else {
            Visibility::Predecessors
        }
    }
}

/// Every hyperparameter of a training run. Missing fields take their
/// defaults; unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// World-model learning rate `η_θ`.
    pub lr_theta: f64,
    /// Critic learning rate `η_w`.
    pub lr_w: f64,
    /// Conjugate-gradient damping `λ`.
    pub cg_damping: f64,
    /// Target-network EMA coefficient.
    pub tau_ema: f64,
    pub gamma: f64,
    /// Soft-value and policy temperature.
    pub tau: f64,
    pub k_inner: usize,
    pub k_cg: usize,
    /// Message width `d_m`.
    pub msg_dim: usize,
    pub lambda_va: f64,
    pub lambda_inf: f64,
    pub lambda_aware: f64,
    pub margin: f64,
    pub lambda_reg: f64,
    /// Gradient clipping norm for both loops.
    pub clip: f64,
    /// Weight of the world model's one-step prediction loss.
    pub alpha_pred: f64,
    /// Outer iterations `T`.
    pub iterations: usize,
    /// Warmup iterations `T_w` for the MC-to-critic annealing and ε.
    pub warmup: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub hidden: usize,
    /// Episodes collected per outer iteration.
    pub episodes_per_iteration: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Paired rollouts per decision-impact Monte-Carlo estimate.
    pub mc_samples: usize,
    pub mc_horizon: usize,
    /// Exploration rate of the Monte-Carlo rollout policy.
    pub mc_epsilon: f64,
    /// Follower orderings sampled per guidance potential.
    pub gp_samples: usize,
    /// Gumbel noise temperature of the training-time ordering.
    pub gumbel_temperature: f64,
    /// Refinement scale `α`.
    pub refine_scale: f64,
    pub value_mode: ValueMode,
    pub inner_optimizer: OptimizerKind,
    pub outer_optimizer: OptimizerKind,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_theta: 3e-5,
            lr_w: 1e-4,
            cg_damping: 0.1,
            tau_ema: 0.99,
            gamma: 0.9,
            tau: 0.1,
            k_inner: 15,
            k_cg: 10,
            msg_dim: 8,
            lambda_va: 0.1,
            lambda_inf: 0.01,
            lambda_aware: 0.05,
            margin: 0.1,
            lambda_reg: 1e-3,
            clip: 1.0,
            alpha_pred: 5.0,
            iterations: 500,
            warmup: 100,
            batch_size: 64,
            buffer_capacity: 10_000,
            hidden: 128,
            episodes_per_iteration: 1,
            epsilon_start: 0.3,
            epsilon_end: 0.05,
            mc_samples: 8,
            mc_horizon: 10,
            mc_epsilon: 0.2,
            gp_samples: 4,
            gumbel_temperature: 0.1,
            refine_scale: 0.1,
            value_mode: ValueMode::Enumerate,
            inner_optimizer: OptimizerKind::Adam,
            outer_optimizer: OptimizerKind::Adam,
            checkpoint_every: 100,
            seed: 0,
            ablation: Ablation::Full,
            env: EnvConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        let positive = [
            ("cg_damping", self.cg_damping),
            ("tau", self.tau),
            ("margin", self.margin),
            ("clip", self.clip),
            ("gumbel_temperature", self.gumbel_temperature),
        ];
        let non_negative = [
            ("lr_theta", self.lr_theta),
            ("lr_w", self.lr_w),
            ("lambda_va", self.lambda_va),
            ("lambda_inf", self.lambda_inf),
            ("lambda_aware", self.lambda_aware),
            ("lambda_reg", self.lambda_reg),
            ("alpha_pred", self.alpha_pred),
            ("refine_scale", self.refine_scale),
        ];
        let mut bad: Vec<String> = Vec::new();
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(alloc::format!("{} must be positive (got {})", name, v));
            }
        }
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(alloc::format!("{} must be non-negative (got {})", name, v));
            }
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("tau_ema", self.tau_ema),
            ("epsilon_start", self.epsilon_start),
            ("epsilon_end", self.epsilon_end),
            ("mc_epsilon", self.mc_epsilon),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bad.push(alloc::format!("{} must be in [0, 1] (got {})", name, v));
            }
        }
        for (name, v) in [
            ("msg_dim", self.msg_dim),
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("hidden", self.hidden),
            ("episodes_per_iteration", self.episodes_per_iteration),
            ("mc_samples", self.mc_samples),
            ("mc_horizon", self.mc_horizon),
            ("gp_samples", self.gp_samples),
        ] {
            if v == 0 {
                bad.push(alloc::format!("{} must be at least 1", name));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(usage!("invalid configuration: {}", bad.join("; ")))
        }
    }

    pub fn shapes(&self) -> Shapes {
        Shapes::hospital(&self.env, self.msg_dim, self.hidden)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            tau: self.tau,
            lambda_reg: self.lambda_reg,
            lambda_aware: self.lambda_aware,
            margin: self.margin,
            value_mode: self.value_mode,
        }
    }

    /// `min(t / T_w, 1)`.
    pub fn beta(&self, t: usize) -> f64 {
        crate::comm::beta_schedule(t, self.warmup)
    }

    /// Exploration rate, linear from `epsilon_start` to `epsilon_end`
    /// over the warmup.
    pub fn epsilon(&self, t: usize) -> f64 {
        let f = self.beta(t);
        self.epsilon_start * (1.0 - f) + self.epsilon_end * f
    }

    /// Auxiliary loss weights after the ablation switches.
    pub fn aux_weights(&self) -> crate::bilevel::AuxWeights {
        let comm = self.ablation.has_comm();
        crate::bilevel::AuxWeights {
            value_aware: if comm && self.ablation != Ablation::NoVa { self.lambda_va } else { 0.0 },
            influence: if comm && self.ablation != Ablation::NoInfluence { self.lambda_inf } else { 0.0 },
            prediction: self.alpha_pred,
        }
    }
}
