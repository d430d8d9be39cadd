use alloc::vec;
use alloc::vec::Vec;

use super::mlp::{Mlp, Segment};
use super::Shapes;
use crate::diffcore::{Tensor, Var};
use crate::error::usage;
use crate::rng::Rng;
use crate::Result;

/// Step size of the residual message correction.
pub const REFINE_SCALE: f64 = 0.1;

/// The outer-loop parameters `theta`.
///
/// Without communication the encoder and refinement networks are absent
/// and every message is zero; the dynamics network keeps its message
/// inputs so both variants share one update path.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    shapes: Shapes,
    encoder: Option<Mlp>,
    refine: Option<Mlp>,
    dynamics: Mlp,
    refine_scale: f64,
}

impl WorldModel {
    pub fn new(shapes: Shapes, comm: bool) -> Self {
        let h = shapes.hidden;
        let (encoder, refine, at) = if comm {
            let enc = Mlp::two_hidden("encoder", shapes.obs, h, shapes.msg, 0);
            let refine = Mlp::two_hidden("refine", shapes.msg + 1, h, shapes.msg, enc.end());
            let end = refine.end();
            (Some(enc), Some(refine), end)
        } else {
            (None, None, 0)
        };
        let input = shapes.state + shapes.agents * (shapes.actions + shapes.msg);
        let dynamics = Mlp::two_hidden("dynamics", input, h, 1 + shapes.state, at);
        Self { shapes, encoder, refine, dynamics, refine_scale: REFINE_SCALE }
    }

    pub fn with_refine_scale(mut self, alpha: f64) -> Self {
        self.refine_scale = alpha;
        self
    }

    pub fn shapes(&self) -> &Shapes {
        &self.shapes
    }

    pub fn has_comm(&self) -> bool {
        self.encoder.is_some()
    }

    pub fn refine_scale(&self) -> f64 {
        self.refine_scale
    }

    pub fn len(&self) -> usize {
        self.dynamics.end()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encoder(&self) -> Option<&Mlp> {
        self.encoder.as_ref()
    }

    pub fn refine_net(&self) -> Option<&Mlp> {
        self.refine.as_ref()
    }

    pub fn dynamics(&self) -> &Mlp {
        &self.dynamics
    }

    pub fn manifest(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        for m in [&self.encoder, &self.refine].into_iter().flatten() {
            out.extend(m.segments());
        }
        out.extend(self.dynamics.segments());
        out
    }

    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.len()];
        for m in [&self.encoder, &self.refine].into_iter().flatten() {
            m.init(&mut p, rng);
        }
        self.dynamics.init(&mut p, rng);
        p
    }

    fn check_obs(&self, width: usize) -> Result<()> {
        if width != self.shapes.obs {
            return Err(usage!("observation width {} != {}", width, self.shapes.obs));
        }
        Ok(())
    }

    /// Base messages `[rows, msg]` for observations `[rows, obs]`.
    pub fn encode<'t>(&self, theta: Var<'t>, obs: Var<'t>) -> Result<Var<'t>> {
        self.check_obs(obs.cols())?;
        Ok(match &self.encoder {
            Some(enc) => enc.forward(theta, obs),
            None => obs.tape().constant(Tensor::zeros(&[obs.rows(), self.shapes.msg])),
        })
    }

    /// `base + alpha * refine(base, dq)`; `dq` is `[rows, 1]`.
    pub fn refine<'t>(&self, theta: Var<'t>, base: Var<'t>, dq: Var<'t>) -> Var<'t> {
        match &self.refine {
            Some(net) => {
                let input = base.tape().concat_cols(&[base, dq]);
                base + net.forward(theta, input).scale(self.refine_scale)
            }
            None => base,
        }
    }

    /// Predicted reward `[rows]` and next state `[rows, state]`. The
    /// next-state head is a residual on the current state.
    pub fn predict<'t>(
        &self,
        theta: Var<'t>,
        state: Var<'t>,
        actions: Var<'t>,
        msgs: Var<'t>,
    ) -> (Var<'t>, Var<'t>) {
        let rows = state.rows();
        let input = state.tape().concat_cols(&[state, actions, msgs]);
        let out = self.dynamics.forward(theta, input);
        let reward = out.slice_cols(0, 1).reshape(&[rows]);
        let next = state + out.slice_cols(1, self.shapes.state);
        (reward, next)
    }

    pub fn encode_eval(&self, theta: &[f64], obs: &[f64], rows: usize) -> Vec<f64> {
        match &self.encoder {
            Some(enc) => enc.eval(theta, obs, rows),
            None => vec![0.0; rows * self.shapes.msg],
        }
    }

    pub fn refine_eval(&self, theta: &[f64], base: &[f64], dq: &[f64], rows: usize) -> Vec<f64> {
        let Some(net) = &self.refine else {
            return base.to_vec();
        };
        let d = self.shapes.msg;
        let mut input = Vec::with_capacity(rows * (d + 1));
        for r in 0..rows {
            input.extend_from_slice(&base[r * d..(r + 1) * d]);
            input.push(dq[r]);
        }
        let delta = net.eval(theta, &input, rows);
        base.iter().zip(&delta).map(|(b, x)| b + self.refine_scale * x).collect()
    }

    /// One unrecorded model step on a single state. `msgs` is `N x msg`
    /// flattened.
    pub fn step_eval(
        &self,
        theta: &[f64],
        state: &[f64],
        actions: &[usize],
        msgs: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let s = &self.shapes;
        if state.len() != s.state || msgs.len() != s.agents * s.msg {
            return Err(usage!("world model input has the wrong shape"));
        }
        let mut input = state.to_vec();
        input.extend(one_hot_actions(actions, s.agents, s.actions)?);
        input.extend_from_slice(msgs);
        let out = self.dynamics.eval(theta, &input, 1);
        let next = state.iter().zip(&out[1..]).map(|(a, b)| a + b).collect();
        Ok((out[0], next))
    }
}

/// Concatenated per-agent one-hot encoding of a joint action.
pub fn one_hot_actions(actions: &[usize], agents: usize, n_actions: usize) -> Result<Vec<f64>> {
    if actions.len() != agents {
        return Err(usage!("expected {} actions, got {}", agents, actions.len()));
    }
    let mut out = vec![0.0; agents * n_actions];
    for (i, &a) in actions.iter().enumerate() {
        if a >= n_actions {
            return Err(usage!("action {} out of range for agent {}", a, i));
        }
        out[i * n_actions + a] = 1.0;
    }
    Ok(out)
}
