use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{cg_solve, BilevelProblem, CgResult};
use crate::comm::{influence_loss, value_aware_loss};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::usage;
use crate::nets::{argmax, one_hot_actions, Critic, Shapes, ValueMode, WorldModel};
use crate::Result;

/// One environment step as stored in the replay buffer. States begin with
/// the agents' concatenated observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// True only for genuine termination; horizon cut-offs still bootstrap.
    pub done: bool,
    /// Decision-impact estimate each agent's message was refined with.
    pub dq_hat: Vec<f64>,
    /// Bitmask of senders each agent's utility conditioned on.
    pub masks: Vec<usize>,
    pub messages: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lambda_reg: f64,
    pub lambda_aware: f64,
    pub margin: f64,
    pub value_mode: ValueMode,
}

/// Constant tensors for a batch of transitions.
#[derive(Clone, Debug)]
pub struct Batch {
    size: usize,
    state: Tensor,
    next_state: Tensor,
    reward: Tensor,
    /// `1 - done`.
    live: Tensor,
    actions: Rc<Vec<usize>>,
    onehot: Tensor,
    dq: Tensor,
    visible: Tensor,
    replicate: Tensor,
}

impl Batch {
    pub fn new(transitions: &[&Transition], shapes: &Shapes) -> Result<Self> {
        let b = transitions.len();
        if b == 0 {
            return Err(usage!("empty batch"));
        }
        let n = shapes.agents;
        let width = n * shapes.msg;
        let mut state = Vec::with_capacity(b * shapes.state);
        let mut next_state = Vec::with_capacity(b * shapes.state);
        let mut reward = Vec::with_capacity(b);
        let mut live = Vec::with_capacity(b);
        let mut actions = Vec::with_capacity(b * n);
        let mut onehot = Vec::with_capacity(b * n * shapes.actions);
        let mut dq = Vec::with_capacity(b * n);
        let mut visible = Vec::with_capacity(b * n * width);
        let mut replicate = vec![0.0; b * n * b];
        for (row, t) in transitions.iter().enumerate() {
            if t.state.len() != shapes.state
                || t.next_state.len() != shapes.state
                || t.dq_hat.len() != n
                || t.masks.len() != n
            {
                return Err(usage!("transition {} does not match the network shapes", row));
            }
            state.extend_from_slice(&t.state);
            next_state.extend_from_slice(&t.next_state);
            reward.push(t.reward);
            live.push(if t.done { 0.0 } else { 1.0 });
            onehot.extend(one_hot_actions(&t.actions, n, shapes.actions)?);
            actions.extend_from_slice(&t.actions);
            dq.extend_from_slice(&t.dq_hat);
            for (k, &mask) in t.masks.iter().enumerate() {
                for i in 0..n {
                    let on = if mask & (1 << i) != 0 && i != k { 1.0 } else { 0.0 };
                    visible.extend(core::iter::repeat_n(on, shapes.msg));
                }
                replicate[(row * n + k) * b + row] = 1.0;
            }
        }
        Ok(Self {
            size: b,
            state: Tensor::matrix(b, shapes.state, state)?,
            next_state: Tensor::matrix(b, shapes.state, next_state)?,
            reward: Tensor::vector(reward),
            live: Tensor::vector(live),
            actions: Rc::new(actions),
            onehot: Tensor::matrix(b, n * shapes.actions, onehot)?,
            dq: Tensor::matrix(b * n, 1, dq)?,
            visible: Tensor::matrix(b * n, width, visible)?,
            replicate: Tensor::matrix(b * n, b, replicate)?,
        })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }
}

/// Tape-building helpers shared by every loss.
struct Graph<'a> {
    model: &'a WorldModel,
    critic: &'a Critic,
    cfg: LossConfig,
}

impl<'a> Graph<'a> {
    fn shapes(&self) -> &Shapes {
        self.critic.shapes()
    }

    /// Per-agent observation rows `[B N, obs]` sliced from states `[B, S]`.
    fn obs_rows<'t>(&self, state: Var<'t>) -> Var<'t> {
        let s = self.shapes();
        let b = state.rows();
        state.slice_cols(0, s.agents * s.obs).reshape(&[b * s.agents, s.obs])
    }

    fn messages<'t>(&self, theta: Var<'t>, obs: Var<'t>, batch: &Batch) -> Result<Var<'t>> {
        let base = self.model.encode(theta, obs)?;
        let dq = obs.tape().constant(batch.dq.clone());
        Ok(self.model.refine(theta, base, dq))
    }

    /// Utility inputs `[B N, obs + N msg]`: each agent's observation and
    /// the messages its mask lets it see.
    fn inputs<'t>(&self, obs: Var<'t>, msgs: Var<'t>, batch: &Batch) -> Var<'t> {
        let s = self.shapes();
        let tape = obs.tape();
        let flat = msgs.reshape(&[batch.size, s.agents * s.msg]);
        let rep = tape.constant(batch.replicate.clone()).matmul(flat);
        let masked = rep * tape.constant(batch.visible.clone());
        tape.concat_cols(&[obs, masked])
    }

    fn silent_inputs<'t>(&self, obs: Var<'t>) -> Var<'t> {
        let s = self.shapes();
        let zeros = obs.tape().constant(Tensor::zeros(&[obs.rows(), s.agents * s.msg]));
        obs.tape().concat_cols(&[obs, zeros])
    }

    fn q<'t>(&self, w: Var<'t>, inputs: Var<'t>, batch: &Batch, state: Var<'t>) -> Var<'t> {
        let utils = self.critic.utilities(w, inputs);
        self.critic.q(w, utils, batch.actions.clone(), state)
    }

    /// Target-critic value at next states, with messages re-encoded there.
    fn bootstrap<'t>(&self, theta: Var<'t>, target: Var<'t>, next: Var<'t>, batch: &Batch) -> Result<Var<'t>> {
        let obs = self.obs_rows(next);
        let msgs = self.model.encode(theta, obs)?;
        let inputs = self.inputs(obs, msgs, batch);
        let utils = self.critic.utilities(target, inputs);
        self.critic.soft_value(target, utils, next, self.cfg.tau, self.cfg.value_mode)
    }

    fn discounted<'t>(&self, v: Var<'t>, batch: &Batch) -> Var<'t> {
        (v * v.tape().constant(batch.live.clone())).scale(self.cfg.gamma)
    }

    /// `r̂ + γ V(ŝ', φ(ŝ'))` from the world model, plus the messages at `s`.
    fn model_target<'t>(&self, theta: Var<'t>, target: Var<'t>, batch: &Batch) -> Result<(Var<'t>, Var<'t>)> {
        let tape = theta.tape();
        let s = self.shapes();
        let state = tape.constant(batch.state.clone());
        let msgs = self.messages(theta, self.obs_rows(state), batch)?;
        let flat = msgs.reshape(&[batch.size, s.agents * s.msg]);
        let onehot = tape.constant(batch.onehot.clone());
        let (r_hat, s_hat) = self.model.predict(theta, state, onehot, flat);
        let v = self.bootstrap(theta, target, s_hat, batch)?;
        Ok((r_hat + self.discounted(v, batch), msgs))
    }

    /// `r + γ V(s', φ(s'))` on real transitions.
    fn true_target<'t>(&self, theta: Var<'t>, target: Var<'t>, batch: &Batch) -> Result<Var<'t>> {
        let tape = theta.tape();
        let next = tape.constant(batch.next_state.clone());
        let v = self.bootstrap(theta, target, next, batch)?;
        Ok(tape.constant(batch.reward.clone()) + self.discounted(v, batch))
    }
}

/// Values of the auxiliary outer losses and the gradient of their
/// weighted sum with respect to `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryGrads {
    pub value_aware: f64,
    pub influence: f64,
    pub prediction: f64,
    pub grad: Vec<f64>,
}

/// Weights of the auxiliary outer losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxWeights {
    pub value_aware: f64,
    pub influence: f64,
    pub prediction: f64,
}

/// The hospital bilevel problem at fixed world-model parameters.
///
/// The inner objective is `L_model + λ_aware L_aware` on the model batch;
/// the outer loss is `L_true` on the environment batch. Curvature is the
/// Gauss-Newton matrix of `L_model`, `(2/B) JᵀJ + 2 λ_reg I` with `J` the
/// Jacobian of the batch Q values.
pub struct HospitalObjective<'a> {
    graph: Graph<'a>,
    theta: Vec<f64>,
    target: Vec<f64>,
    model_batch: Batch,
    env_batch: Batch,
    inputs: Tensor,
    silent: Tensor,
    y_model: Tensor,
}

impl<'a> HospitalObjective<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a WorldModel,
        critic: &'a Critic,
        theta: &[f64],
        target: &[f64],
        model_batch: Batch,
        env_batch: Batch,
        cfg: LossConfig,
    ) -> Result<Self> {
        if theta.len() != model.len() || target.len() != critic.len() {
            return Err(usage!("parameter vectors do not match the networks"));
        }
        let graph = Graph { model, critic, cfg };
        let (inputs, silent, y_model) = {
            let tape = Tape::new();
            let th = tape.constant(Tensor::vector(theta.to_vec()));
            let tg = tape.constant(Tensor::vector(target.to_vec()));
            let (y, msgs) = graph.model_target(th, tg, &model_batch)?;
            let obs = graph.obs_rows(tape.constant(model_batch.state.clone()));
            let inputs = graph.inputs(obs, msgs, &model_batch);
            tape.check_finite()?;
            (inputs.value(), graph.silent_inputs(obs).value(), y.value())
        };
        Ok(Self {
            graph,
            theta: theta.to_vec(),
            target: target.to_vec(),
            model_batch,
            env_batch,
            inputs,
            silent,
            y_model,
        })
    }

    fn cfg(&self) -> &LossConfig {
        &self.graph.cfg
    }

    fn batch_q<'t>(&self, tape: &'t Tape, w: Var<'t>) -> (Var<'t>, Var<'t>) {
        let state = tape.constant(self.model_batch.state.clone());
        let q = self.graph.q(w, tape.constant(self.inputs.clone()), &self.model_batch, state);
        let q0 = self.graph.q(w, tape.constant(self.silent.clone()), &self.model_batch, state);
        (q, q0)
    }

    fn inner_terms<'t>(&self, tape: &'t Tape, w: Var<'t>) -> (Var<'t>, Var<'t>) {
        let (q, q0) = self.batch_q(tape, w);
        let y = tape.constant(self.y_model.clone());
        let model = (q - y).square().mean() + w.sq_norm().scale(self.cfg().lambda_reg);
        let aware = (q - q0).abs().scale(-1.0).offset(self.cfg().margin).relu().mean();
        (model, aware)
    }

    /// `L_model(w)`: squared error against model targets plus `λ_reg ‖w‖²`.
    pub fn model_loss(&self, w: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let (m, _) = self.inner_terms(&tape, tape.constant(Tensor::vector(w.to_vec())));
        tape.check_finite()?;
        Ok(m.item())
    }

    /// `L_aware(w)`: mean hinge `max(0, ε − |Q(s,a,M) − Q(s,a,0)|)`.
    pub fn awareness_loss(&self, w: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let (_, a) = self.inner_terms(&tape, tape.constant(Tensor::vector(w.to_vec())));
        tape.check_finite()?;
        Ok(a.item())
    }

    /// `L_true(w)` on the environment batch.
    pub fn true_loss(&self, w: &[f64]) -> Result<f64> {
        Ok(self.outer_value_grads(w)?.0)
    }

    /// Mean `|Q(s,a,M) − Q(s,a,0)|` over the model batch.
    pub fn message_gap(&self, w: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let (q, q0) = self.batch_q(&tape, tape.constant(Tensor::vector(w.to_vec())));
        Ok((q - q0).abs().mean().item())
    }

    /// Model-generated targets `y_model` for the model batch.
    pub fn model_targets(&self) -> &[f64] {
        self.y_model.data()
    }

    fn with_curvature<R>(
        &self,
        w: &[f64],
        f: impl FnOnce(&mut dyn FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<R>,
    ) -> Result<R> {
        let tape = Tape::new();
        let wv = tape.leaf(Tensor::vector(w.to_vec()));
        let (q, _) = self.batch_q(&tape, wv);
        let b = self.model_batch.size;
        let u = tape.leaf(Tensor::zeros(&[b]));
        let jt_u = tape.grad((q * u).sum(), &[wv])?[0];
        let scale = 2.0 / b as f64;
        let reg = 2.0 * self.cfg().lambda_reg;
        let mut hvp = |v: &[f64]| -> Result<Vec<f64>> {
            if v.len() != w.len() {
                return Err(usage!("direction length {} != {}", v.len(), w.len()));
            }
            let dir = tape.constant(Tensor::vector(v.to_vec()));
            let jv = tape.grad((jt_u * dir).sum(), &[u])?[0].value();
            let jtjv = tape.grad((q * tape.constant(jv)).sum(), &[wv])?[0].to_vec();
            Ok(jtjv.iter().zip(v).map(|(g, x)| scale * g + reg * x).collect())
        };
        f(&mut hvp)
    }

    /// Gradient of `λ_VA L_VA + λ_inf L_inf + α_pred L_pred` with respect to
    /// `theta`, holding the online critic `w` fixed.
    pub fn auxiliary(&self, w: &[f64], weights: AuxWeights) -> Result<AuxiliaryGrads> {
        let g = &self.graph;
        let s = *g.shapes();
        let tape = Tape::new();
        let theta = tape.leaf(Tensor::vector(self.theta.clone()));
        let wv = tape.constant(Tensor::vector(w.to_vec()));

        let env = &self.env_batch;
        let state = tape.constant(env.state.clone());
        let msgs = g.messages(theta, g.obs_rows(state), env)?;
        let onehot = tape.constant(env.onehot.clone());
        let (r_hat, s_hat) = g.model.predict(theta, state, onehot, msgs.reshape(&[env.size, s.agents * s.msg]));
        let r_err = (r_hat - tape.constant(env.reward.clone())).square().mean();
        let s_err = (s_hat - tape.constant(env.next_state.clone())).square().mean();
        let prediction = r_err + s_err;
        let mut total = prediction.scale(weights.prediction);

        let (mut value_aware, mut influence) = (0.0, 0.0);
        if g.model.has_comm() && s.agents >= 2 {
            let (va, inf) = self.communication_losses(&tape, theta, wv)?;
            value_aware = va.item();
            influence = inf.item();
            total = total + va.scale(weights.value_aware) + inf.scale(weights.influence);
        }
        let grad = tape.grad(total, &[theta])?[0].to_vec();
        Ok(AuxiliaryGrads { value_aware, influence, prediction: prediction.item(), grad })
    }

    /// `L_VA` and `L_inf` over every (sample, sender, receiver) triple of
    /// the model batch: receiver `j` sees only sender `i`'s message.
    fn communication_losses<'t>(&self, tape: &'t Tape, theta: Var<'t>, w: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let g = &self.graph;
        let s = *g.shapes();
        let batch = &self.model_batch;
        let (b, n) = (batch.size, s.agents);
        let rows = b * n;
        let pairs = b * n * (n - 1);
        let mut receive = vec![0.0; pairs * rows];
        let mut send: Vec<Vec<f64>> = vec![vec![0.0; pairs * rows]; n];
        let mut p = 0;
        for bi in 0..b {
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    receive[p * rows + bi * n + j] = 1.0;
                    send[i][p * rows + bi * n + i] = 1.0;
                    p += 1;
                }
            }
        }
        let receive = tape.constant(Tensor::matrix(pairs, rows, receive)?);
        let state = tape.constant(batch.state.clone());
        let obs = g.obs_rows(state);
        let msgs = g.messages(theta, obs, batch)?;
        let mut slots: Option<Var<'t>> = None;
        for (i, sel) in send.into_iter().enumerate() {
            let part = tape
                .constant(Tensor::matrix(pairs, rows, sel)?)
                .matmul(msgs)
                .pad_cols(i * s.msg, n * s.msg);
            slots = Some(match slots {
                Some(acc) => acc + part,
                None => part,
            });
        }
        let inputs = tape.concat_cols(&[receive.matmul(obs), slots.expect("at least two agents")]);
        let with = g.critic.utilities(w, inputs);
        let without = receive.matmul(g.critic.utilities(w, g.silent_inputs(obs)));
        let best = |u: Var<'t>| -> Rc<Vec<usize>> {
            Rc::new(u.with_value(|t| t.data().chunks(s.actions).map(argmax).collect()))
        };
        let dq = with.gather(best(with)) - without.gather(best(without));
        let va = value_aware_loss(dq, b, n)?;
        let inf = influence_loss(with, without, g.cfg.tau)?;
        Ok((va, inf))
    }
}

impl BilevelProblem for HospitalObjective<'_> {
    fn inner_value_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let wv = tape.leaf(Tensor::vector(w.to_vec()));
        let (model, aware) = self.inner_terms(&tape, wv);
        let loss = model + aware.scale(self.cfg().lambda_aware);
        let g = tape.grad(loss, &[wv])?;
        Ok((loss.item(), g[0].to_vec()))
    }

    fn inner_hvp(&self, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.with_curvature(w, |hvp| hvp(v))
    }

    fn solve_inner_system(&self, w: &[f64], b: &[f64], lambda: f64, max_iter: usize) -> Result<CgResult> {
        self.with_curvature(w, |hvp| cg_solve(hvp, b, lambda, max_iter))
    }

    fn mixed_product(&self, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let g = &self.graph;
        let tape = Tape::new();
        let theta = tape.leaf(Tensor::vector(self.theta.clone()));
        let wv = tape.leaf(Tensor::vector(w.to_vec()));
        let target = tape.constant(Tensor::vector(self.target.clone()));
        let batch = &self.model_batch;
        let (y, msgs) = g.model_target(theta, target, batch)?;
        let state = tape.constant(batch.state.clone());
        let q = g.q(wv, g.inputs(g.obs_rows(state), msgs, batch), batch, state);
        let loss = (q - y).square().mean() + wv.sq_norm().scale(self.cfg().lambda_reg);
        let gw = tape.grad(loss, &[wv])?[0];
        let dir = tape.constant(Tensor::vector(v.to_vec()));
        Ok(tape.grad(gw.dot(dir), &[theta])?[0].to_vec())
    }

    fn outer_value_grads(&self, w: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let g = &self.graph;
        let tape = Tape::new();
        let theta = tape.leaf(Tensor::vector(self.theta.clone()));
        let wv = tape.leaf(Tensor::vector(w.to_vec()));
        let target = tape.constant(Tensor::vector(self.target.clone()));
        let batch = &self.env_batch;
        let y = g.true_target(theta, target, batch)?;
        let state = tape.constant(batch.state.clone());
        let obs = g.obs_rows(state);
        let msgs = g.messages(theta, obs, batch)?;
        let q = g.q(wv, g.inputs(obs, msgs, batch), batch, state);
        let loss = (q - y).square().mean();
        let grads = tape.grad(loss, &[wv, theta])?;
        Ok((loss.item(), grads[0].to_vec(), grads[1].to_vec()))
    }
}
