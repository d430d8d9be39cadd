//! Parametric function approximators: the world model `theta` (message
//! encoder, message refinement, dynamics) and the critic `w` (shared
//! per-agent utility, monotone mixer, state bias).
//!
//! Each parameter set is one flat `Vec<f64>`; networks address their
//! tensors by offset, and [`Segment`]s name them for checkpoints.

mod critic;
mod mlp;
mod world;

pub(crate) use critic::argmax;
pub use critic::{soft_value_table, target_ema_update, Critic, ValueMode, ENUMERATION_LIMIT};
pub use mlp::{orthogonal, Mlp, Segment, LEAKY_SLOPE};
pub use world::{one_hot_actions, WorldModel, REFINE_SCALE};

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, NUM_ACTIONS};

/// Widths shared by every network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shapes {
    pub obs: usize,
    pub state: usize,
    pub agents: usize,
    pub actions: usize,
    pub msg: usize,
    pub hidden: usize,
}

impl Shapes {
    pub fn hospital(env: &EnvConfig, msg: usize, hidden: usize) -> Self {
        Self {
            obs: env.obs_dim(),
            state: env.state_dim(),
            agents: env.agents,
            actions: NUM_ACTIONS,
            msg,
            hidden,
        }
    }

    /// Width of one agent's utility input: its observation and every
    /// agent's message slot.
    pub fn utility_input(&self) -> usize {
        self.obs + self.agents * self.msg
    }
}
