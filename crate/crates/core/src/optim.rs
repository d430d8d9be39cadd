//! First-order parameter updates over flat parameter vectors.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::diffcore::norm;

/// Rescales `g` in place so its norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let n = norm(g);
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        g.iter_mut().for_each(|x| *x *= s);
    }
    n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `p -= lr * g`
    Sgd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam,
}

/// Optimizer state for one flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { dim } else { 0 };
        Self {
            kind,
            lr,
            m: vec![0.0; state],
            v: vec![0.0; state],
            steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - libm::pow(BETA1, t as f64);
                let c2 = 1.0 - libm::pow(BETA2, t as f64);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.lr * mh / (libm::sqrt(vh) + ADAM_EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_norm() {
        let mut g = [3.0, 4.0];
        assert_eq!(clip_norm(&mut g, 1.0), 5.0);
        assert!((norm(&g) - 1.0).abs() < 1e-12);
        let mut small = [0.1, 0.0];
        clip_norm(&mut small, 1.0);
        assert_eq!(small, [0.1, 0.0]);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.0, 2);
            let mut p = [1.0, -2.0];
            opt.step(&mut p, &[0.5, 0.5]);
            assert_eq!(p, [1.0, -2.0]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 2);
        let mut p = [0.0, 0.0];
        opt.step(&mut p, &[2.0, -0.001]);
        assert!((p[0] + 0.01).abs() < 1e-6);
        assert!((p[1] - 0.01).abs() < 1e-4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clipped_norm_never_exceeds_cap(
                g in proptest::collection::vec(-100.0f64..100.0, 1..20),
                cap in 0.01f64..10.0,
            ) {
                let mut c = g.clone();
                let before = clip_norm(&mut c, cap);
                prop_assert!((before - norm(&g)).abs() <= 1e-12 * (1.0 + before));
                prop_assert!(norm(&c) <= cap * (1.0 + 1e-12));
                if before <= cap {
                    prop_assert_eq!(c, g);
                }
            }
        }
    }
}
