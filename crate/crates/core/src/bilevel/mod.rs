//! Bilevel optimization: the inner loop fits the critic `w` to targets the
//! world model `theta` generates; the outer loop moves `theta` along the
//! implicit-function-theorem hypergradient of the loss on real data,
//!
//! `dL_true/dθ = ∇_θ L_true − ∇_θ(∇_w L_model · v*)`, `(H + λI) v* = ∇_w L_true`,
//!
//! with `v*` from damped conjugate gradient.

mod cg;
mod hospital;
mod quadratic;

pub use cg::{cg_solve, CgResult, CG_TOLERANCE};
pub use hospital::{
    AuxWeights, AuxiliaryGrads, Batch, HospitalObjective, LossConfig, Transition,
};
pub use quadratic::{NeuralToy, QuadraticBilevel};

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffcore::norm;
use crate::error::numerical;
use crate::optim::{clip_norm, Optimizer};
use crate::Result;

/// Exit gradient norm above which the inner solution is flagged.
pub const INNER_WARNING_NORM: f64 = 1e-2;

/// A bilevel problem with its outer parameters fixed.
pub trait BilevelProblem {
    /// `L_inner(w)` and `∇_w L_inner(w)`.
    fn inner_value_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Curvature product `H v` of the inner objective at `w`.
    fn inner_hvp(&self, w: &[f64], v: &[f64]) -> Result<Vec<f64>>;

    /// `∇_θ (∇_w L_model(w, θ) · v)`.
    fn mixed_product(&self, w: &[f64], v: &[f64]) -> Result<Vec<f64>>;

    /// `(L_true, ∇_w L_true, ∇_θ L_true)` at `w`.
    fn outer_value_grads(&self, w: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)>;

    /// Solves `(H + λI) v = b` at `w`. Implementations may cache work
    /// shared across curvature products.
    fn solve_inner_system(&self, w: &[f64], b: &[f64], lambda: f64, max_iter: usize) -> Result<CgResult> {
        cg_solve(|v| self.inner_hvp(w, v), b, lambda, max_iter)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopResult {
    pub w: Vec<f64>,
    pub loss: f64,
    pub entry_grad_norm: f64,
    /// Unclipped gradient norm at the returned `w`.
    pub grad_norm: f64,
    /// Set when `grad_norm` exceeds [`INNER_WARNING_NORM`].
    pub warning: bool,
}

/// Runs `steps` clipped optimizer steps on the inner objective from `w`.
pub fn inner_loop<P: BilevelProblem + ?Sized>(
    problem: &P,
    w: &[f64],
    steps: usize,
    optimizer: &mut Optimizer,
    clip: f64,
) -> Result<InnerLoopResult> {
    let mut w = w.to_vec();
    let (mut loss, mut g) = problem.inner_value_grad(&w)?;
    let entry_grad_norm = norm(&g);
    for k in 0..steps {
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(numerical!("inner loss is not finite at step {} (loss {})", k, loss));
        }
        clip_norm(&mut g, clip);
        optimizer.step(&mut w, &g);
        (loss, g) = problem.inner_value_grad(&w)?;
    }
    if !loss.is_finite() {
        return Err(numerical!("inner loss is not finite after {} steps", steps));
    }
    let grad_norm = norm(&g);
    Ok(InnerLoopResult { w, loss, entry_grad_norm, grad_norm, warning: grad_norm > INNER_WARNING_NORM })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HypergradientReport {
    pub true_loss: f64,
    pub direct_norm: f64,
    pub indirect_norm: f64,
    pub cg_residual: f64,
    pub cg_iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypergradient {
    pub grad: Vec<f64>,
    pub report: HypergradientReport,
}

/// IFT hypergradient at the inner solution `w_star`.
pub fn hypergradient<P: BilevelProblem + ?Sized>(
    problem: &P,
    w_star: &[f64],
    lambda: f64,
    cg_iters: usize,
) -> Result<Hypergradient> {
    let (true_loss, b, direct) = problem.outer_value_grads(w_star)?;
    let cg = problem.solve_inner_system(w_star, &b, lambda, cg_iters)?;
    let indirect = if cg.x.iter().all(|&x| x == 0.0) {
        alloc::vec![0.0; direct.len()]
    } else {
        problem.mixed_product(w_star, &cg.x)?
    };
    let grad: Vec<f64> = direct.iter().zip(&indirect).map(|(d, i)| d - i).collect();
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(numerical!("hypergradient is not finite"));
    }
    Ok(Hypergradient {
        report: HypergradientReport {
            true_loss,
            direct_norm: norm(&direct),
            indirect_norm: norm(&indirect),
            cg_residual: cg.residual,
            cg_iterations: cg.iterations,
        },
        grad,
    })
}

#[cfg(test)]
mod tests;
