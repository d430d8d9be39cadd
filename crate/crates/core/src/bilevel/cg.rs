use alloc::vec::Vec;

use crate::diffcore::{axpy, dot, norm};
use crate::error::usage;
use crate::{Error, Result};

/// Residual below which the solve stops early.
pub const CG_TOLERANCE: f64 = 1e-8;
/// Consecutive residual increases tolerated before giving up.
const MAX_INCREASES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct CgResult {
    pub x: Vec<f64>,
    /// `||(H + lambda I) x - b||`, recomputed from `x`.
    pub residual: f64,
    pub iterations: usize,
}

/// Solves `(H + lambda I) x = b` by conjugate gradient from `x = 0`, with
/// `hvp(v) = H v`. Stops after `max_iter` iterations or once the residual
/// drops below [`CG_TOLERANCE`]; fails with an ill-conditioning error if
/// the residual grows three iterations in a row.
pub fn cg_solve<F>(mut hvp: F, b: &[f64], lambda: f64, max_iter: usize) -> Result<CgResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(lambda >= 0.0) {
        return Err(usage!("damping must be non-negative, got {}", lambda));
    }
    let n = b.len();
    let mut apply = |v: &[f64]| -> Result<Vec<f64>> {
        let mut out = hvp(v)?;
        if out.len() != n {
            return Err(usage!("curvature product has length {}, expected {}", out.len(), n));
        }
        axpy(lambda, v, &mut out);
        Ok(out)
    };
    let mut x = alloc::vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut last = libm::sqrt(rr);
    let mut increases = 0;
    let mut iterations = 0;
    if last < CG_TOLERANCE {
        return Ok(CgResult { x, residual: last, iterations });
    }
    while iterations < max_iter {
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::IllConditioned(alloc::format!(
                "curvature along search direction is {}",
                pap
            )));
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        iterations += 1;
        let next = dot(&r, &r);
        let res = libm::sqrt(next);
        if !res.is_finite() {
            return Err(crate::error::numerical!("conjugate gradient residual is not finite"));
        }
        if res > last {
            increases += 1;
            if increases >= MAX_INCREASES {
                return Err(Error::IllConditioned(alloc::format!(
                    "residual grew for {} consecutive iterations (now {})",
                    MAX_INCREASES,
                    res
                )));
            }
        } else {
            increases = 0;
        }
        last = res;
        if res < CG_TOLERANCE {
            break;
        }
        let beta = next / rr;
        rr = next;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    let mut check = apply(&x)?;
    check.iter_mut().zip(b).for_each(|(c, bi)| *c -= bi);
    Ok(CgResult { residual: norm(&check), x, iterations })
}
