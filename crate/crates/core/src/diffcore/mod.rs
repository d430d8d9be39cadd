//! Dense-tensor reverse-mode differentiation with second-order support.
//!
//! A [`Tape`] records every primitive applied to [`Var`]s. [`Tape::grad`]
//! records its own backward pass on the same tape, so a gradient is an
//! ordinary expression that can be dotted with a vector and differentiated
//! again. That is all the Hessian-vector products need.
//!
//! ```
//! use seqcomm_core::diffcore::{grad, Tensor};
//!
//! // f(w) = 0.5 * |w|^2
//! let (value, g) = grad(
//!     |_, p| Ok(p[0].sq_norm().scale(0.5)),
//!     &[Tensor::vector(vec![3.0, 4.0])],
//! )
//! .unwrap();
//! assert_eq!(value, 12.5);
//! assert_eq!(g[0].data(), &[3.0, 4.0]);
//! ```

mod tape;
mod tensor;

use alloc::vec::Vec;

pub use tape::{Tape, Var};
pub use tensor::{axpy, dot, gemm, norm, Tensor};

use crate::error::usage;
use crate::Result;

/// Pins a closure to the signature the differentiation helpers expect.
/// Closures bound to a `let` lose the higher-ranked tape lifetime otherwise.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Floor in the denominator of relative finite-difference errors.
pub const FD_EPS_FLOOR: f64 = 1e-6;

/// Gradient of a scalar function of several parameter tensors. Returns the
/// function value and one gradient per parameter.
pub fn grad<F>(f: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let y = f(&tape, &leaves)?;
    let grads = tape.grad(y, &leaves)?;
    Ok((y.item(), grads.iter().map(|g| g.value()).collect()))
}

/// Hessian-vector product `H v` of a scalar function, by differentiating
/// `grad(f) . v` a second time.
pub fn hvp<F>(f: F, params: &[Tensor], v: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if v.len() != params.len() {
        return Err(usage!(
            "hvp direction has {} tensors, parameters have {}",
            v.len(),
            params.len()
        ));
    }
    for (p, d) in params.iter().zip(v) {
        if p.shape() != d.shape() {
            return Err(usage!(
                "hvp direction shape {:?} does not match parameter shape {:?}",
                d.shape(),
                p.shape()
            ));
        }
        if !d.is_finite() {
            return Err(crate::error::numerical!("hvp direction is not finite"));
        }
    }
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let y = f(&tape, &leaves)?;
    let grads = tape.grad(y, &leaves)?;
    let mut inner: Option<Var<'_>> = None;
    for (g, d) in grads.iter().zip(v) {
        let term = g.dot(tape.constant(d.clone()));
        inner = Some(match inner {
            Some(acc) => acc + term,
            None => term,
        });
    }
    let Some(inner) = inner else {
        return Ok(Vec::new());
    };
    let hv = tape.grad(inner, &leaves)?;
    Ok(hv.iter().map(|h| h.value()).collect())
}

/// Evaluates `f` without differentiating.
pub fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let y = f(&tape, &leaves)?;
    tape.check_finite()?;
    if y.len() != 1 {
        return Err(usage!("function output has shape {:?}, expected a scalar", y.shape()));
    }
    Ok(y.item())
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / (libm::fabs(analytic) + libm::fabs(numeric) + FD_EPS_FLOOR)
}

fn central_difference<F>(f: &F, params: &[Tensor], tensor: usize, coord: usize, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut shifted = params.to_vec();
    let x0 = params[tensor].data()[coord];
    shifted[tensor].data_mut()[coord] = x0 + eps;
    let up = eval(f, &shifted)?;
    shifted[tensor].data_mut()[coord] = x0 - eps;
    let down = eval(f, &shifted)?;
    Ok((up - down) / (2.0 * eps))
}

/// Maximum relative error between the analytic gradient and central
/// differences over every coordinate of every parameter.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |c| (t, c)))
        .collect();
    finite_diff_check_coords(f, params, eps, &coords)
}

/// [`finite_diff_check`] restricted to the listed `(tensor, flat index)`
/// coordinates. Large networks are probed this way.
pub fn finite_diff_check_coords<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(usage!("finite-difference step must be positive, got {}", eps));
    }
    let (_, analytic) = grad(&f, params)?;
    let mut worst: f64 = 0.0;
    for &(t, c) in coords {
        if t >= params.len() || c >= params[t].len() {
            return Err(usage!("coordinate ({}, {}) out of range", t, c));
        }
        let numeric = central_difference(&f, params, t, c, eps)?;
        worst = worst.max(relative_error(analytic[t].data()[c], numeric));
    }
    Ok(worst)
}

/// Relative error between `grad(f) . d` and the central difference of `f`
/// along the direction `d`. Covers every coordinate with two evaluations.
pub fn directional_diff_check<F>(f: F, params: &[Tensor], direction: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(usage!("finite-difference step must be positive, got {}", eps));
    }
    let (_, analytic) = grad(&f, params)?;
    let slope: f64 = analytic
        .iter()
        .zip(direction)
        .map(|(g, d)| dot(g.data(), d.data()))
        .sum();
    let shift = |sign: f64| -> Vec<Tensor> {
        params
            .iter()
            .zip(direction)
            .map(|(p, d)| {
                let mut q = p.clone();
                axpy(sign * eps, d.data(), q.data_mut());
                q
            })
            .collect()
    };
    let up = eval(&f, &shift(1.0))?;
    let down = eval(&f, &shift(-1.0))?;
    Ok(relative_error(slope, (up - down) / (2.0 * eps)))
}

#[cfg(test)]
mod tests;
