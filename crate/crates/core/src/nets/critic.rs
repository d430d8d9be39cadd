use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, Segment};
use super::Shapes;
use crate::diffcore::{Tensor, Var};
use crate::error::usage;
use crate::rng::Rng;
use crate::{Error, Result};

/// Joint-action enumeration is refused beyond `N * ln|A| > 20`.
pub const ENUMERATION_LIMIT: f64 = 20.0;

/// How the bootstrap value at a next state is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    /// `tau * logsumexp(Q / tau)` over every joint action.
    Enumerate,
    /// Mixer applied to each agent's maximal utility.
    Factored,
}

/// The inner-loop parameters `w`: a utility network shared by all agents
/// (agent identity is part of the observation), non-negative mixing
/// weights via `|w|`, and a state-conditioned bias.
///
/// `Q(s, a, M) = sum_i |w_i| * u_i(o_i, M_i, a_i) + b(s)`
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    shapes: Shapes,
    utility: Mlp,
    mixer: Segment,
    bias: Mlp,
}

impl Critic {
    pub fn new(shapes: Shapes) -> Self {
        let h = shapes.hidden;
        let utility = Mlp::two_hidden("utility", shapes.utility_input(), h, shapes.actions, 0);
        let mixer = Segment {
            name: "mixer.weight".into(),
            shape: vec![shapes.agents],
            offset: utility.end(),
        };
        let bias = Mlp::two_hidden("state_bias", shapes.state, h, 1, mixer.range().end);
        Self { shapes, utility, mixer, bias }
    }

    pub fn shapes(&self) -> &Shapes {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.bias.end()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn utility_net(&self) -> &Mlp {
        &self.utility
    }

    pub fn bias_net(&self) -> &Mlp {
        &self.bias
    }

    pub fn mixer_segment(&self) -> &Segment {
        &self.mixer
    }

    pub fn manifest(&self) -> Vec<Segment> {
        let mut out = self.utility.segments();
        out.push(self.mixer.clone());
        out.extend(self.bias.segments());
        out
    }

    /// Orthogonal MLP weights; unit mixing weights.
    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.len()];
        self.utility.init(&mut p, rng);
        p[self.mixer.range()].iter_mut().for_each(|x| *x = 1.0);
        self.bias.init(&mut p, rng);
        p
    }

    /// Number of network evaluations one value backup needs.
    pub fn evaluation_count(&self, mode: ValueMode) -> usize {
        match mode {
            ValueMode::Factored => self.shapes.agents * self.shapes.actions,
            ValueMode::Enumerate => self.shapes.actions.pow(self.shapes.agents as u32),
        }
    }

    /// Per-action utilities `[rows, actions]` from utility inputs
    /// `[rows, obs + N * msg]`.
    pub fn utilities<'t>(&self, w: Var<'t>, inputs: Var<'t>) -> Var<'t> {
        self.utility.forward(w, inputs)
    }

    fn mix_weights<'t>(&self, w: Var<'t>) -> Var<'t> {
        w.slice(self.mixer.offset, &[self.shapes.agents]).abs()
    }

    fn state_bias<'t>(&self, w: Var<'t>, state: Var<'t>) -> Var<'t> {
        let rows = state.rows();
        self.bias.forward(w, state).reshape(&[rows])
    }

    /// Mixes chosen utilities `[batch, N]` into joint values `[batch]`.
    pub fn mix<'t>(&self, w: Var<'t>, chosen: Var<'t>, state: Var<'t>) -> Var<'t> {
        let rows = chosen.rows();
        let weights = self.mix_weights(w).broadcast_rows(rows);
        (chosen * weights).sum_cols() + self.state_bias(w, state)
    }

    /// Joint `Q(s, a, M)` `[batch]`. `utils` is `[batch * N, actions]`
    /// with agent `i` of sample `b` at row `b * N + i`; `actions` indexes
    /// the same rows.
    pub fn q<'t>(&self, w: Var<'t>, utils: Var<'t>, actions: Rc<Vec<usize>>, state: Var<'t>) -> Var<'t> {
        let n = self.shapes.agents;
        let chosen = utils.gather(actions).reshape(&[state.rows(), n]);
        self.mix(w, chosen, state)
    }

    /// Value of every sample under `mode` at temperature `tau`.
    pub fn soft_value<'t>(
        &self,
        w: Var<'t>,
        utils: Var<'t>,
        state: Var<'t>,
        tau: f64,
        mode: ValueMode,
    ) -> Result<Var<'t>> {
        let (n, na) = (self.shapes.agents, self.shapes.actions);
        let rows = state.rows();
        let tape = w.tape();
        match mode {
            ValueMode::Factored => {
                let best: Vec<usize> = utils.with_value(|u| {
                    u.data().chunks(na).map(argmax).collect()
                });
                Ok(self.q(w, utils, Rc::new(best), state))
            }
            ValueMode::Enumerate => {
                if !(tau > 0.0) {
                    return Err(usage!("soft value temperature must be positive, got {}", tau));
                }
                let joint = enumeration_size(n, na)?;
                let per_sample = utils.reshape(&[rows, n * na]);
                let weights = self.mix_weights(w);
                let mut q: Option<Var<'t>> = None;
                for i in 0..n {
                    let select = tape.constant(joint_selector(n, na, i));
                    let wi = weights.slice(i, &[1]).expand(&[rows, na]);
                    let term = (per_sample.slice_cols(i * na, na) * wi).matmul(select);
                    q = Some(match q {
                        Some(acc) => acc + term,
                        None => term,
                    });
                }
                let q = q.unwrap() + self.state_bias(w, state).broadcast_cols(joint);
                Ok(q.scale(1.0 / tau).logsumexp_rows().scale(tau))
            }
        }
    }

    pub fn utilities_eval(&self, w: &[f64], inputs: &[f64], rows: usize) -> Vec<f64> {
        self.utility.eval(w, inputs, rows)
    }

    pub fn mixer_weights_eval(&self, w: &[f64]) -> Vec<f64> {
        w[self.mixer.range()].iter().map(|x| x.abs()).collect()
    }

    pub fn bias_eval(&self, w: &[f64], state: &[f64]) -> f64 {
        self.bias.eval(w, state, 1)[0]
    }
}

fn enumeration_size(agents: usize, actions: usize) -> Result<usize> {
    let log_size = agents as f64 * libm::log(actions as f64);
    if log_size > ENUMERATION_LIMIT {
        return Err(Error::Capability(alloc::format!(
            "enumerating {}^{} joint actions exceeds the limit",
            actions,
            agents
        )));
    }
    Ok(actions.pow(agents as u32))
}

/// `[actions, actions^N]` one-hot map from agent `i`'s action to every
/// joint action (little-endian, agent 0 least significant).
fn joint_selector(agents: usize, actions: usize, i: usize) -> Tensor {
    let joint = actions.pow(agents as u32);
    let stride = actions.pow(i as u32);
    let mut data = vec![0.0; actions * joint];
    for j in 0..joint {
        let a = (j / stride) % actions;
        data[a * joint + j] = 1.0;
    }
    Tensor::matrix(actions, joint, data).expect("selector shape")
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `tau * log(sum exp(q / tau))` over a table, with max subtraction.
pub fn soft_value_table(q: &[f64], tau: f64) -> Result<f64> {
    if q.is_empty() || !(tau > 0.0) {
        return Err(usage!("soft value needs a non-empty table and positive temperature"));
    }
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = q.iter().map(|x| libm::exp((x - m) / tau)).sum();
    Ok(m + tau * libm::log(s))
}

/// `target <- tau * target + (1 - tau) * online`.
pub fn target_ema_update(target: &mut [f64], online: &[f64], tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(usage!("EMA coefficient {} outside [0, 1]", tau));
    }
    if target.len() != online.len() {
        return Err(usage!("EMA length mismatch"));
    }
    for (t, w) in target.iter_mut().zip(online) {
        *t = tau * *t + (1.0 - tau) * w;
    }
    Ok(())
}
