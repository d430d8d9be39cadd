use alloc::vec;
use alloc::vec::Vec;

use super::BilevelProblem;
use crate::diffcore::{self, scalar_fn, Tape, Tensor, Var};
use crate::nets::LEAKY_SLOPE;
use crate::Result;

/// `L_model = ½ (w − Aθ)ᵀ P (w − Aθ)`, `L_true = ½ ‖w − c‖²`, with `P`
/// symmetric positive definite (identity unless given).
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticBilevel {
    /// `n x m`, row-major.
    pub a: Vec<f64>,
    /// `n x n`, row-major.
    pub p: Vec<f64>,
    pub c: Vec<f64>,
    pub theta: Vec<f64>,
}

impl QuadraticBilevel {
    pub fn new(a: Vec<f64>, c: Vec<f64>, theta: Vec<f64>) -> Self {
        let n = c.len();
        let mut p = vec![0.0; n * n];
        (0..n).for_each(|i| p[i * n + i] = 1.0);
        Self { a, p, c, theta }
    }

    pub fn with_curvature(mut self, p: Vec<f64>) -> Self {
        assert_eq!(p.len(), self.c.len() * self.c.len());
        self.p = p;
        self
    }

    fn n(&self) -> usize {
        self.c.len()
    }

    fn m(&self) -> usize {
        self.theta.len()
    }

    /// `A θ`, the inner minimizer.
    pub fn w_star(&self) -> Vec<f64> {
        self.a
            .chunks(self.m())
            .map(|row| row.iter().zip(&self.theta).map(|(a, t)| a * t).sum())
            .collect()
    }

    fn p_times(&self, v: &[f64]) -> Vec<f64> {
        self.p.chunks(self.n()).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    fn a_transpose_times(&self, v: &[f64]) -> Vec<f64> {
        let m = self.m();
        let mut out = vec![0.0; m];
        for (i, row) in self.a.chunks(m).enumerate() {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * v[i];
            }
        }
        out
    }

    /// Damped closed form `Aᵀ(Aθ − c) / (1 + λ)` for identity curvature.
    pub fn closed_form(&self, lambda: f64) -> Vec<f64> {
        let r: Vec<f64> = self.w_star().iter().zip(&self.c).map(|(w, c)| (w - c) / (1.0 + lambda)).collect();
        self.a_transpose_times(&r)
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn inner_value_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d: Vec<f64> = w.iter().zip(self.w_star()).map(|(w, t)| w - t).collect();
        let g = self.p_times(&d);
        let loss = 0.5 * d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        Ok((loss, g))
    }

    fn inner_hvp(&self, _w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.p_times(v))
    }

    fn mixed_product(&self, _w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        // ∇_w L_model · v = (w − Aθ)ᵀ P v, so ∇_θ of it is −Aᵀ P v.
        Ok(self.a_transpose_times(&self.p_times(v)).into_iter().map(|x| -x).collect())
    }

    fn outer_value_grads(&self, w: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let d: Vec<f64> = w.iter().zip(&self.c).map(|(w, c)| w - c).collect();
        let loss = 0.5 * d.iter().map(|x| x * x).sum::<f64>();
        Ok((loss, d, vec![0.0; self.m()]))
    }
}

/// A one-neuron network `f_w(x) = leaky(w₀ x + w₁)` fit to targets
/// `θ₀ x + θ₁` produced by a two-parameter model, judged against fixed
/// true targets.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralToy {
    pub xs: Vec<f64>,
    pub truth: Vec<f64>,
    pub theta: Vec<f64>,
    pub lambda_reg: f64,
}

impl NeuralToy {
    fn predict<'t>(&self, tape: &'t Tape, w: Var<'t>) -> Var<'t> {
        let n = self.xs.len();
        let x = tape.constant(Tensor::vector(self.xs.clone()));
        let w0 = w.slice(0, &[1]).expand(&[n]);
        let w1 = w.slice(1, &[1]).expand(&[n]);
        (w0 * x + w1).leaky_relu(LEAKY_SLOPE)
    }

    fn targets<'t>(&self, tape: &'t Tape, theta: Var<'t>) -> Var<'t> {
        let n = self.xs.len();
        let x = tape.constant(Tensor::vector(self.xs.clone()));
        theta.slice(0, &[1]).expand(&[n]) * x + theta.slice(1, &[1]).expand(&[n])
    }

    fn model_loss<'t>(&self, tape: &'t Tape, w: Var<'t>, theta: Var<'t>) -> Var<'t> {
        (self.predict(tape, w) - self.targets(tape, theta)).square().mean() + w.sq_norm().scale(self.lambda_reg)
    }

    fn true_loss<'t>(&self, tape: &'t Tape, w: Var<'t>) -> Var<'t> {
        let truth = tape.constant(Tensor::vector(self.truth.clone()));
        (self.predict(tape, w) - truth).square().mean()
    }

    /// Gradient of `L_true(w_K(θ))` where `w_K` is `steps` plain gradient
    /// steps on the model loss from `w0`, differentiated through every step.
    pub fn unrolled_hypergradient(&self, w0: &[f64], steps: usize, lr: f64) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let theta = tape.leaf(Tensor::vector(self.theta.clone()));
        let mut w = tape.leaf(Tensor::vector(w0.to_vec()));
        for _ in 0..steps {
            let loss = self.model_loss(&tape, w, theta);
            let g = tape.grad(loss, &[w])?;
            w = w - g[0].scale(lr);
        }
        let g = tape.grad(self.true_loss(&tape, w), &[theta])?;
        Ok(g[0].to_vec())
    }

    /// Plain gradient descent on the model loss.
    pub fn solve_inner(&self, w0: &[f64], steps: usize, lr: f64) -> Result<Vec<f64>> {
        let mut w = w0.to_vec();
        for _ in 0..steps {
            let (_, g) = self.inner_value_grad(&w)?;
            w.iter_mut().zip(&g).for_each(|(w, g)| *w -= lr * g);
        }
        Ok(w)
    }
}

impl BilevelProblem for NeuralToy {
    fn inner_value_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let theta = Tensor::vector(self.theta.clone());
        let f = scalar_fn(|t, p| {
            let th = t.constant(theta.clone());
            Ok(self.model_loss(t, p[0], th))
        });
        let (v, g) = diffcore::grad(f, &[Tensor::vector(w.to_vec())])?;
        Ok((v, g[0].data().to_vec()))
    }

    fn inner_hvp(&self, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let theta = Tensor::vector(self.theta.clone());
        let f = scalar_fn(|t, p| {
            let th = t.constant(theta.clone());
            Ok(self.model_loss(t, p[0], th))
        });
        let hv = diffcore::hvp(f, &[Tensor::vector(w.to_vec())], &[Tensor::vector(v.to_vec())])?;
        Ok(hv[0].data().to_vec())
    }

    fn mixed_product(&self, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let wv = tape.leaf(Tensor::vector(w.to_vec()));
        let th = tape.leaf(Tensor::vector(self.theta.clone()));
        let gw = tape.grad(self.model_loss(&tape, wv, th), &[wv])?;
        let dir = tape.constant(Tensor::vector(v.to_vec()));
        let g = tape.grad(gw[0].dot(dir), &[th])?;
        Ok(g[0].to_vec())
    }

    fn outer_value_grads(&self, w: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let tape = Tape::new();
        let wv = tape.leaf(Tensor::vector(w.to_vec()));
        let loss = self.true_loss(&tape, wv);
        let g = tape.grad(loss, &[wv])?;
        Ok((loss.item(), g[0].to_vec(), vec![0.0; self.theta.len()]))
    }
}
