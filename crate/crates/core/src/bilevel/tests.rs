use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::diffcore::dot;
use crate::error::usage;
use crate::nets::{soft_value_table, Critic, Shapes, ValueMode, WorldModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{self, Rng};
use crate::Error;

fn randn(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng::normal(rng)).collect()
}

/// Dense Gaussian elimination with partial pivoting.
fn dense_solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().total_cmp(&a[j * n + c].abs())).unwrap();
        for k in 0..n {
            a.swap(c * n + k, p * n + k);
        }
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r * n + c] / a[c * n + c];
            for k in c..n {
                a[r * n + k] -= f * a[c * n + k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * n + r];
    }
    x
}

fn mat_vec(a: &[f64], v: &[f64]) -> Vec<f64> {
    a.chunks(v.len()).map(|row| dot(row, v)).collect()
}

fn random_spd(rng: &mut Rng, n: usize) -> Vec<f64> {
    let m = randn(rng, n * n);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum::<f64>() / n as f64;
        }
        a[i * n + i] += 0.5;
    }
    a
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-12)
}

#[test]
fn cg_identity_one_iteration() {
    let b = [0.3, -1.2, 2.0];
    let r = cg_solve(|v| Ok(v.to_vec()), &b, 0.0, 10).unwrap();
    assert_eq!(r.iterations, 1);
    assert!(max_abs_diff(&r.x, &b) < 1e-12);
}

#[test]
fn cg_damped_diagonal() {
    let r = cg_solve(|v| Ok(vec![v[0], 2.0 * v[1]]), &[1.0, 1.0], 0.1, 10).unwrap();
    let oracle = dense_solve(vec![1.1, 0.0, 0.0, 2.1], vec![1.0, 1.0]);
    assert!(max_abs_diff(&r.x, &oracle) < 1e-12);
    assert!(max_abs_diff(&r.x, &[1.0 / 1.1, 1.0 / 2.1]) < 1e-12);
}

#[test]
fn cg_zero_rhs() {
    let r = cg_solve(|v| Ok(v.to_vec()), &[0.0; 4], 0.1, 10).unwrap();
    assert_eq!(r.x, vec![0.0; 4]);
    assert_eq!(r.iterations, 0);
}

#[test]
fn cg_rejects_negative_damping() {
    assert!(matches!(cg_solve(|v| Ok(v.to_vec()), &[1.0], -0.1, 10), Err(Error::Usage(_))));
}

#[test]
fn cg_flags_indefinite_curvature() {
    let r = cg_solve(|v| Ok(v.iter().map(|x| -x).collect()), &[1.0, 2.0], 0.0, 10);
    assert!(matches!(r, Err(Error::IllConditioned(_))));
}

#[test]
fn cg_propagates_oracle_errors() {
    let r = cg_solve(|_| Err(usage!("boom")), &[1.0], 0.1, 10);
    assert!(matches!(r, Err(Error::Usage(_))));
}

#[test]
fn cg_matches_dense_solve_on_random_spd() {
    let mut rng = rng::seeded(7);
    for trial in 0..50 {
        let n = 2 + trial % 19;
        let a = random_spd(&mut rng, n);
        let b = randn(&mut rng, n);
        let r = cg_solve(|v| Ok(mat_vec(&a, v)), &b, 0.0, n).unwrap();
        let oracle = dense_solve(a.clone(), b.clone());
        assert!(r.iterations <= n);
        assert!(r.residual < 1e-8, "n={} residual {}", n, r.residual);
        assert!(rel_err(&r.x, &oracle) < 1e-8);
    }
}

#[test]
fn cg_reports_true_residual_when_truncated() {
    let mut rng = rng::seeded(3);
    let a = random_spd(&mut rng, 12);
    let b = randn(&mut rng, 12);
    let r = cg_solve(|v| Ok(mat_vec(&a, v)), &b, 0.1, 2).unwrap();
    let mut check = mat_vec(&a, &r.x);
    check.iter_mut().zip(&r.x).zip(&b).for_each(|((c, x), b)| *c += 0.1 * x - b);
    assert_eq!(r.iterations, 2);
    assert!((r.residual - norm(&check)).abs() < 1e-12);
}

fn random_quadratic(rng: &mut Rng, n: usize, m: usize) -> QuadraticBilevel {
    QuadraticBilevel::new(randn(rng, n * m), randn(rng, n), randn(rng, m))
}

#[test]
fn quadratic_hypergradient_matches_closed_form() {
    let mut rng = rng::seeded(11);
    for &lambda in &[0.0, 0.1, 1.0] {
        for _ in 0..10 {
            let q = random_quadratic(&mut rng, 6, 4);
            let h = hypergradient(&q, &q.w_star(), lambda, 10).unwrap();
            assert!(max_abs_diff(&h.grad, &q.closed_form(lambda)) < 1e-6);
        }
    }
}

#[test]
fn identity_toy_hypergradient_is_theta() {
    let theta = vec![0.5, -1.5, 2.0];
    let mut a = vec![0.0; 9];
    (0..3).for_each(|i| a[i * 3 + i] = 1.0);
    let q = QuadraticBilevel::new(a, vec![0.0; 3], theta.clone());
    let exact = hypergradient(&q, &q.w_star(), 0.0, 10).unwrap();
    assert!(max_abs_diff(&exact.grad, &theta) < 1e-12);
    let damped = hypergradient(&q, &q.w_star(), 0.1, 10).unwrap();
    let expect: Vec<f64> = theta.iter().map(|t| t / 1.1).collect();
    assert!(max_abs_diff(&damped.grad, &expect) < 1e-12);
}

#[test]
fn zero_outer_gradient_leaves_direct_term() {
    let mut rng = rng::seeded(5);
    let q = random_quadratic(&mut rng, 5, 3);
    let c = q.w_star();
    let q = QuadraticBilevel { c, ..q };
    let h = hypergradient(&q, &q.w_star(), 0.1, 10).unwrap();
    assert_eq!(h.grad, vec![0.0; 3]);
    assert_eq!(h.report.indirect_norm, 0.0);
    assert_eq!(h.report.cg_iterations, 0);
}

fn neural_toy() -> NeuralToy {
    let xs: Vec<f64> = (0..16).map(|i| -1.0 + 2.0 * i as f64 / 15.0).collect();
    let truth = xs.iter().map(|x| 1.5 * x + 1.8 + 0.2 * x * x).collect();
    NeuralToy { xs, truth, theta: vec![1.0, 2.0], lambda_reg: 1e-3 }
}

#[test]
fn neural_toy_matches_unrolled_differentiation() {
    let toy = neural_toy();
    let w0 = [0.2, 0.1];
    let (steps, lr) = (50, 0.4);
    let unrolled = toy.unrolled_hypergradient(&w0, steps, lr).unwrap();
    let w = toy.solve_inner(&w0, steps, lr).unwrap();
    let ift = hypergradient(&toy, &w, 1e-3, 10).unwrap();
    let err = rel_err(&ift.grad, &unrolled);
    assert!(err < 5e-2, "relative error {}", err);
}

#[test]
fn neural_toy_mixed_product_matches_finite_difference() {
    let toy = neural_toy();
    let w = [0.7, 1.3];
    let v = [0.4, -0.9];
    let g = toy.mixed_product(&w, &v).unwrap();
    let eps = 1e-6;
    for k in 0..2 {
        let mut plus = toy.clone();
        let mut minus = toy.clone();
        plus.theta[k] += eps;
        minus.theta[k] -= eps;
        let f = |t: &NeuralToy| dot(&t.inner_value_grad(&w).unwrap().1, &v);
        let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
        assert!((fd - g[k]).abs() < 1e-6, "coord {}: {} vs {}", k, fd, g[k]);
    }
}

/// Ill-conditioned quadratic where the inner loop starts away from `w*`:
/// bias against the exact hypergradient for each `(K_inner, K_CG)`.
fn bias_grid() -> Vec<Vec<f64>> {
    let n = 30;
    let mut rng = rng::seeded(21);
    let mut p = vec![0.0; n * n];
    (0..n).for_each(|i| p[i * n + i] = libm::pow(100.0, i as f64 / (n - 1) as f64) / 100.0);
    let q = random_quadratic(&mut rng, n, 4).with_curvature(p);
    let exact = {
        let (_, b, _) = q.outer_value_grads(&q.w_star()).unwrap();
        let v: Vec<f64> = b.iter().enumerate().map(|(i, x)| x / q.p[i * n + i]).collect();
        q.mixed_product(&q.w_star(), &v).unwrap().iter().map(|x| -x).collect::<Vec<f64>>()
    };
    [5, 15, 50]
        .iter()
        .map(|&k_inner| {
            let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0, n);
            let w = inner_loop(&q, &vec![0.0; n], k_inner, &mut opt, f64::INFINITY).unwrap().w;
            [3, 10, 30]
                .iter()
                .map(|&k_cg| {
                    let h = hypergradient(&q, &w, 0.0, k_cg).unwrap();
                    norm(&h.grad.iter().zip(&exact).map(|(a, b)| a - b).collect::<Vec<_>>())
                })
                .collect()
        })
        .collect()
}

#[test]
fn hypergradient_bias_shrinks_with_more_iterations() {
    let grid = bias_grid();
    for i in 0..3 {
        for j in 0..3 {
            if i + 1 < 3 {
                assert!(grid[i + 1][j] < grid[i][j], "K_inner trend broken: {:?}", grid);
            }
            if j + 1 < 3 {
                assert!(grid[i][j + 1] < grid[i][j], "K_CG trend broken: {:?}", grid);
            }
        }
    }
}

#[test]
fn inner_loop_converges_on_quadratic() {
    let c = vec![1.0, -2.0, 0.5];
    let mut a = vec![0.0; 9];
    (0..3).for_each(|i| a[i * 3 + i] = 1.0);
    let q = QuadraticBilevel::new(a, vec![0.0; 3], c.clone());
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, 3);
    let r = inner_loop(&q, &[0.0; 3], 60, &mut opt, f64::INFINITY).unwrap();
    assert!(max_abs_diff(&r.w, &c) < 1e-12);
    assert!(r.grad_norm < r.entry_grad_norm);
    assert!(!r.warning);
}

#[test]
fn inner_loop_zero_steps_is_identity() {
    let mut rng = rng::seeded(2);
    let q = random_quadratic(&mut rng, 4, 2);
    let w = randn(&mut rng, 4);
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 4);
    let r = inner_loop(&q, &w, 0, &mut opt, 1.0).unwrap();
    assert_eq!(r.w, w);
    assert_eq!(r.grad_norm, r.entry_grad_norm);
    assert!(r.warning);
}

#[test]
fn inner_loop_clips_and_descends() {
    let mut rng = rng::seeded(4);
    for _ in 0..20 {
        let q = random_quadratic(&mut rng, 5, 3);
        let w = randn(&mut rng, 5);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 5);
        let r = inner_loop(&q, &w, 15, &mut opt, 1.0).unwrap();
        assert!(r.grad_norm < r.entry_grad_norm);
        let moved: Vec<f64> = r.w.iter().zip(&w).map(|(a, b)| a - b).collect();
        assert!(norm(&moved) <= 15.0 * 0.1 + 1e-12);
    }
}

#[test]
fn inner_loop_aborts_on_nan() {
    let q = QuadraticBilevel::new(vec![1.0], vec![0.0], vec![f64::NAN]);
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 1);
    assert!(matches!(inner_loop(&q, &[0.0], 3, &mut opt, 1.0), Err(Error::Numerical(_))));
}

// Hospital objective on small networks.

fn shapes() -> Shapes {
    Shapes { obs: 3, state: 11, agents: 3, actions: 3, msg: 2, hidden: 6 }
}

fn loss_config() -> LossConfig {
    LossConfig {
        gamma: 0.9,
        tau: 0.1,
        lambda_reg: 1e-3,
        lambda_aware: 0.05,
        margin: 0.1,
        value_mode: ValueMode::Enumerate,
    }
}

fn transitions(rng: &mut Rng, count: usize, s: &Shapes) -> Vec<Transition> {
    (0..count)
        .map(|k| Transition {
            state: (0..s.state).map(|_| rng::unit(rng)).collect(),
            actions: (0..s.agents).map(|_| rng::index(rng, s.actions)).collect(),
            reward: rng::normal(rng),
            next_state: (0..s.state).map(|_| rng::unit(rng)).collect(),
            done: k % 5 == 4,
            dq_hat: randn(rng, s.agents),
            masks: (0..s.agents).map(|_| rng::index(rng, 1 << s.agents)).collect(),
            messages: vec![0.0; s.agents * s.msg],
        })
        .collect()
}

struct Fixture {
    model: WorldModel,
    critic: Critic,
    theta: Vec<f64>,
    target: Vec<f64>,
    w: Vec<f64>,
    data: Vec<Transition>,
    env: Vec<Transition>,
}

fn fixture(seed: u64) -> Fixture {
    let s = shapes();
    let mut rng = rng::seeded(seed);
    let model = WorldModel::new(s, true);
    let critic = Critic::new(s);
    let theta = model.init(&mut rng);
    let mut target = critic.init(&mut rng);
    target.iter_mut().for_each(|x| *x += 0.1 * rng::normal(&mut rng));
    let w = critic.init(&mut rng);
    let data = transitions(&mut rng, 6, &s);
    let env = transitions(&mut rng, 5, &s);
    Fixture { model, critic, theta, target, w, data, env }
}

impl Fixture {
    fn objective_at(&self, theta: &[f64], cfg: LossConfig) -> HospitalObjective<'_> {
        let s = shapes();
        let data: Vec<&Transition> = self.data.iter().collect();
        let env: Vec<&Transition> = self.env.iter().collect();
        HospitalObjective::new(
            &self.model,
            &self.critic,
            theta,
            &self.target,
            Batch::new(&data, &s).unwrap(),
            Batch::new(&env, &s).unwrap(),
            cfg,
        )
        .unwrap()
    }

    fn objective(&self) -> HospitalObjective<'_> {
        self.objective_at(&self.theta, loss_config())
    }
}

/// Q value of one agent-masked joint action, computed without the tape.
fn manual_q(f: &Fixture, w: &[f64], state: &[f64], msgs: &[f64], masks: &[usize], actions: &[usize]) -> f64 {
    let s = shapes();
    let mix = f.critic.mixer_weights_eval(w);
    let mut q = f.critic.bias_eval(w, state);
    for k in 0..s.agents {
        let mut input = state[k * s.obs..(k + 1) * s.obs].to_vec();
        for i in 0..s.agents {
            let on = i != k && masks[k] & (1 << i) != 0;
            input.extend((0..s.msg).map(|d| if on { msgs[i * s.msg + d] } else { 0.0 }));
        }
        q += mix[k] * f.critic.utilities_eval(w, &input, 1)[actions[k]];
    }
    q
}

fn manual_model_target(f: &Fixture, t: &Transition, gamma: f64) -> f64 {
    let s = shapes();
    let obs = &t.state[..s.agents * s.obs];
    let base = f.model.encode_eval(&f.theta, obs, s.agents);
    let msgs = f.model.refine_eval(&f.theta, &base, &t.dq_hat, s.agents);
    let (r_hat, next) = f.model.step_eval(&f.theta, &t.state, &t.actions, &msgs).unwrap();
    let next_msgs = f.model.encode_eval(&f.theta, &next[..s.agents * s.obs], s.agents);
    let joint: Vec<f64> = (0..27)
        .map(|j| {
            let a = [j % 3, (j / 3) % 3, j / 9];
            manual_q(f, &f.target, &next, &next_msgs, &t.masks, &a)
        })
        .collect();
    let live = if t.done { 0.0 } else { 1.0 };
    r_hat + gamma * live * soft_value_table(&joint, 0.1).unwrap()
}

#[test]
fn model_loss_matches_manual_single_transition() {
    let mut f = fixture(1);
    f.data.truncate(1);
    f.data[0].done = false;
    let obj = f.objective();
    let t = f.data[0].clone();
    let y = manual_model_target(&f, &t, 0.9);
    assert!((obj.model_targets()[0] - y).abs() < 1e-10);
    let s = shapes();
    let base = f.model.encode_eval(&f.theta, &t.state[..s.agents * s.obs], s.agents);
    let msgs = f.model.refine_eval(&f.theta, &base, &t.dq_hat, s.agents);
    let q = manual_q(&f, &f.w, &t.state, &msgs, &t.masks, &t.actions);
    let expect = (q - y) * (q - y) + 1e-3 * dot(&f.w, &f.w);
    assert!((obj.model_loss(&f.w).unwrap() - expect).abs() < 1e-10);
}

#[test]
fn model_loss_vanishes_for_zero_networks() {
    let mut f = fixture(2);
    f.theta.iter_mut().for_each(|x| *x = 0.0);
    let obj = f.objective_at(&f.theta, LossConfig { gamma: 0.0, ..loss_config() });
    assert!(obj.model_targets().iter().all(|&y| y == 0.0));
    assert_eq!(obj.model_loss(&vec![0.0; f.critic.len()]).unwrap(), 0.0);
}

#[test]
fn true_loss_equals_model_residual_on_model_transitions() {
    let mut f = fixture(3);
    let s = shapes();
    for t in f.data.iter_mut() {
        let base = f.model.encode_eval(&f.theta, &t.state[..s.agents * s.obs], s.agents);
        let msgs = f.model.refine_eval(&f.theta, &base, &t.dq_hat, s.agents);
        let (r, next) = f.model.step_eval(&f.theta, &t.state, &t.actions, &msgs).unwrap();
        t.reward = r;
        t.next_state = next;
    }
    f.env = f.data.clone();
    let obj = f.objective();
    let reg = 1e-3 * dot(&f.w, &f.w);
    let diff = obj.true_loss(&f.w).unwrap() - (obj.model_loss(&f.w).unwrap() - reg);
    assert!(diff.abs() < 1e-10, "{}", diff);
}

#[test]
fn true_loss_without_discount_is_reward_regression() {
    let f = fixture(4);
    let cfg = LossConfig { gamma: 0.0, ..loss_config() };
    let obj = f.objective_at(&f.theta, cfg);
    let s = shapes();
    let expect: f64 = f
        .env
        .iter()
        .map(|t| {
            let base = f.model.encode_eval(&f.theta, &t.state[..s.agents * s.obs], s.agents);
            let msgs = f.model.refine_eval(&f.theta, &base, &t.dq_hat, s.agents);
            let q = manual_q(&f, &f.w, &t.state, &msgs, &t.masks, &t.actions);
            (q - t.reward) * (q - t.reward)
        })
        .sum::<f64>()
        / f.env.len() as f64;
    assert!((obj.true_loss(&f.w).unwrap() - expect).abs() < 1e-10);
}

#[test]
fn awareness_hinge_values() {
    let mut f = fixture(5);
    // Agents that see no messages have no gap.
    f.data.iter_mut().for_each(|t| t.masks = vec![0; 3]);
    let obj = f.objective();
    assert!((obj.awareness_loss(&f.w).unwrap() - 0.1).abs() < 1e-12);
    assert_eq!(obj.message_gap(&f.w).unwrap(), 0.0);
    let wide = f.objective_at(&f.theta, LossConfig { margin: 0.0, ..loss_config() });
    assert_eq!(wide.awareness_loss(&f.w).unwrap(), 0.0);
}

#[test]
fn awareness_hinge_tracks_gap() {
    let f = fixture(6);
    let obj = f.objective();
    let gap = obj.message_gap(&f.w).unwrap();
    let hinge = obj.awareness_loss(&f.w).unwrap();
    assert!(gap > 0.0);
    assert!(hinge <= 0.1 && hinge >= 0.1 - gap - 1e-12);
}

#[test]
fn empty_batch_is_usage_error() {
    assert!(matches!(Batch::new(&[], &shapes()), Err(Error::Usage(_))));
}

fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], coords: &[usize], eps: f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&k| {
            let mut p = x.to_vec();
            p[k] += eps;
            let hi = f(&p);
            p[k] -= 2.0 * eps;
            (hi - f(&p)) / (2.0 * eps)
        })
        .collect()
}

fn sample_coords(rng: &mut Rng, len: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng::index(rng, len)).collect()
}

#[test]
fn inner_gradient_matches_finite_difference() {
    let f = fixture(7);
    let obj = f.objective();
    let (_, g) = obj.inner_value_grad(&f.w).unwrap();
    let mut rng = rng::seeded(0);
    let coords = sample_coords(&mut rng, f.w.len(), 25);
    let fd = fd_grad(|w| obj.inner_value_grad(w).unwrap().0, &f.w, &coords, 1e-6);
    for (k, &c) in coords.iter().enumerate() {
        assert!((fd[k] - g[c]).abs() < 1e-5 * (1.0 + g[c].abs()), "coord {}: {} vs {}", c, fd[k], g[c]);
    }
}

#[test]
fn outer_gradients_match_finite_difference() {
    let f = fixture(8);
    let obj = f.objective();
    let (_, gw, gt) = obj.outer_value_grads(&f.w).unwrap();
    let mut rng = rng::seeded(1);
    let cw = sample_coords(&mut rng, f.w.len(), 20);
    let fd = fd_grad(|w| obj.true_loss(w).unwrap(), &f.w, &cw, 1e-6);
    for (k, &c) in cw.iter().enumerate() {
        assert!((fd[k] - gw[c]).abs() < 1e-5 * (1.0 + gw[c].abs()));
    }
    let ct = sample_coords(&mut rng, f.theta.len(), 20);
    let fd = fd_grad(|t| f.objective_at(t, loss_config()).true_loss(&f.w).unwrap(), &f.theta, &ct, 1e-6);
    for (k, &c) in ct.iter().enumerate() {
        assert!((fd[k] - gt[c]).abs() < 1e-5 * (1.0 + gt[c].abs()), "theta {}: {} vs {}", c, fd[k], gt[c]);
    }
}

#[test]
fn mixed_product_matches_finite_difference() {
    let f = fixture(9);
    let obj = f.objective();
    let mut rng = rng::seeded(2);
    let v = randn(&mut rng, f.w.len());
    let g = obj.mixed_product(&f.w, &v).unwrap();
    let model_grad = |theta: &[f64]| -> f64 {
        let o = f.objective_at(theta, LossConfig { lambda_aware: 0.0, ..loss_config() });
        dot(&o.inner_value_grad(&f.w).unwrap().1, &v)
    };
    let coords = sample_coords(&mut rng, f.theta.len(), 20);
    let fd = fd_grad(model_grad, &f.theta, &coords, 1e-6);
    for (k, &c) in coords.iter().enumerate() {
        assert!((fd[k] - g[c]).abs() < 1e-5 * (1.0 + g[c].abs()), "theta {}: {} vs {}", c, fd[k], g[c]);
    }
}

#[test]
fn gauss_newton_product_is_symmetric_psd_and_matches_jacobian() {
    let f = fixture(10);
    let obj = f.objective();
    let mut rng = rng::seeded(3);
    let (u, v) = (randn(&mut rng, f.w.len()), randn(&mut rng, f.w.len()));
    let hu = obj.inner_hvp(&f.w, &u).unwrap();
    let hv = obj.inner_hvp(&f.w, &v).unwrap();
    assert!((dot(&u, &hv) - dot(&v, &hu)).abs() < 1e-9 * (1.0 + dot(&u, &hv).abs()));
    assert!(dot(&v, &hv) >= 2e-3 * dot(&v, &v) - 1e-12);

    // Independent route: J v by central differences of the batch Q values.
    let eps = 1e-6;
    let q_at = |w: &[f64]| -> Vec<f64> {
        let s = shapes();
        f.data
            .iter()
            .map(|t| {
                let base = f.model.encode_eval(&f.theta, &t.state[..s.agents * s.obs], s.agents);
                let msgs = f.model.refine_eval(&f.theta, &base, &t.dq_hat, s.agents);
                manual_q(&f, w, &t.state, &msgs, &t.masks, &t.actions)
            })
            .collect()
    };
    let shifted = |sign: f64| -> Vec<f64> {
        q_at(&f.w.iter().zip(&v).map(|(w, d)| w + sign * eps * d).collect::<Vec<_>>())
    };
    let jv: Vec<f64> = shifted(1.0).iter().zip(shifted(-1.0)).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    let quad = 2.0 / f.data.len() as f64 * dot(&jv, &jv) + 2e-3 * dot(&v, &v);
    assert!((dot(&v, &hv) - quad).abs() < 1e-5 * (1.0 + quad), "{} vs {}", dot(&v, &hv), quad);
}

#[test]
fn cached_curvature_solve_matches_fresh_products() {
    let f = fixture(11);
    let obj = f.objective();
    let mut rng = rng::seeded(4);
    let b = randn(&mut rng, f.w.len());
    let cached = obj.solve_inner_system(&f.w, &b, 0.1, 10).unwrap();
    let fresh = cg_solve(|v| obj.inner_hvp(&f.w, v), &b, 0.1, 10).unwrap();
    assert!(max_abs_diff(&cached.x, &fresh.x) < 1e-9);
}

#[test]
fn auxiliary_gradient_matches_finite_difference() {
    let f = fixture(12);
    let obj = f.objective();
    let weights = AuxWeights { value_aware: 0.1, influence: 0.01, prediction: 5.0 };
    let aux = obj.auxiliary(&f.w, weights).unwrap();
    assert!(aux.prediction > 0.0 && aux.influence <= 0.0);
    let total = |theta: &[f64]| -> f64 {
        let a = f.objective_at(theta, loss_config()).auxiliary(&f.w, weights).unwrap();
        0.1 * a.value_aware + 0.01 * a.influence + 5.0 * a.prediction
    };
    let mut rng = rng::seeded(5);
    let coords = sample_coords(&mut rng, f.theta.len(), 20);
    let fd = fd_grad(total, &f.theta, &coords, 1e-6);
    for (k, &c) in coords.iter().enumerate() {
        let g = aux.grad[c];
        assert!((fd[k] - g).abs() < 1e-4 * (1.0 + g.abs()), "theta {}: {} vs {}", c, fd[k], g);
    }
}

#[test]
fn silent_model_has_no_communication_losses() {
    let s = shapes();
    let mut rng = rng::seeded(13);
    let model = WorldModel::new(s, false);
    let critic = Critic::new(s);
    let theta = model.init(&mut rng);
    let w = critic.init(&mut rng);
    let data = transitions(&mut rng, 4, &s);
    let refs: Vec<&Transition> = data.iter().collect();
    let obj = HospitalObjective::new(
        &model,
        &critic,
        &theta,
        &w,
        Batch::new(&refs, &s).unwrap(),
        Batch::new(&refs, &s).unwrap(),
        loss_config(),
    )
    .unwrap();
    let aux = obj.auxiliary(&w, AuxWeights { value_aware: 0.1, influence: 0.01, prediction: 5.0 }).unwrap();
    assert_eq!((aux.value_aware, aux.influence), (0.0, 0.0));
    assert_eq!(obj.message_gap(&w).unwrap(), 0.0);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn cg_solves_spd_systems_within_n_steps(seed in any::<u64>(), n in 1usize..=20, lambda in 0.0f64..1.0) {
            let mut rng = rng::seeded(seed);
            let a = random_spd(&mut rng, n);
            let b = randn(&mut rng, n);
            let r = cg_solve(|v| Ok(mat_vec(&a, v)), &b, lambda, n).unwrap();
            let mut damped = a.clone();
            (0..n).for_each(|i| damped[i * n + i] += lambda);
            let x = dense_solve(damped, b.clone());
            prop_assert!(rel_err(&r.x, &x) < 1e-6);
        }

        #[test]
        fn quadratic_hypergradient_is_closed_form(seed in any::<u64>(), lambda in 0.0f64..2.0) {
            let mut rng = rng::seeded(seed);
            let q = random_quadratic(&mut rng, 5, 3);
            let h = hypergradient(&q, &q.w_star(), lambda, 20).unwrap();
            prop_assert!(max_abs_diff(&h.grad, &q.closed_form(lambda)) < 1e-6);
        }
    }
}
