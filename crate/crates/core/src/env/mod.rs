//! Environments: the hospital Dec-POMDP and small tabular oracles.

mod hospital;
mod penalties;
mod toy;

pub use hospital::{
    EnvConfig, HospitalEnv, Patient, StepOutcome, StepMetrics, EFFICACY, NUM_ACTIONS,
    NUM_CONDITIONS, NUM_VITALS,
};
pub use penalties::{blind_penalty, drug_penalty, resource_penalty, validate_drug_matrix};
pub use toy::{make_toy_env, ToyEnv, ToySpec};

use crate::Result;

/// An environment that can be cloned mid-episode and replayed with a
/// fresh noise stream. Monte-Carlo decision-impact estimates use it for
/// paired rollouts.
pub trait Rollout: Clone {
    /// Replaces the internal noise stream.
    fn reseed(&mut self, seed: u64);
    /// Applies a joint action; returns the shared reward and whether the
    /// episode ended.
    fn advance(&mut self, actions: &[usize]) -> Result<(f64, bool)>;
}
