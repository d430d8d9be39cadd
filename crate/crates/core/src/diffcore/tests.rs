use super::*;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn half_sq<'t>(_: &'t Tape, p: &[Var<'t>]) -> Result<Var<'t>> {
    Ok(p[0].sq_norm().scale(0.5))
}

/// Central differences of the gradient along `v`: the Hessian oracle.
fn fd_hvp<F>(f: &F, params: &[Tensor], v: &[Tensor], eps: f64) -> Vec<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let shifted = |s: f64| -> Vec<Tensor> {
        params
            .iter()
            .zip(v)
            .map(|(p, d)| {
                let mut q = p.clone();
                axpy(s * eps, d.data(), q.data_mut());
                q
            })
            .collect()
    };
    let (_, gp) = grad(f, &shifted(1.0)).unwrap();
    let (_, gm) = grad(f, &shifted(-1.0)).unwrap();
    gp.iter()
        .zip(&gm)
        .flat_map(|(a, b)| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) / (2.0 * eps))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / (norm(a).max(norm(b)) + 1e-12)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn gradient_of_half_squared_norm() {
    let (v, g) = grad(half_sq, &[Tensor::vector(vec![3.0, 4.0])]).unwrap();
    assert_eq!(v, 12.5);
    assert_eq!(g[0].data(), &[3.0, 4.0]);
}

#[test]
fn gradient_of_constant_is_zero() {
    let (v, g) = grad(|t, _| Ok(t.scalar(7.0)), &[Tensor::vector(vec![1.0, 2.0])]).unwrap();
    assert_eq!(v, 7.0);
    assert_eq!(g[0].data(), &[0.0, 0.0]);
}

#[test]
fn leaky_relu_gradient_uses_negative_slope() {
    let f = scalar_fn(|_, p| { Ok(p[0].leaky_relu(0.01).sum()) });
    let (_, g) = grad(f, &[Tensor::vector(vec![-1.0, 2.0])]).unwrap();
    assert_eq!(g[0].data(), &[0.01, 1.0]);
    // tie-break at exactly zero
    let (_, g) = grad(f, &[Tensor::vector(vec![0.0])]).unwrap();
    assert_eq!(g[0].data(), &[0.01]);
}

#[test]
fn non_scalar_output_is_usage_error() {
    let err = grad(|_, p| Ok(p[0].scale(2.0)), &[Tensor::vector(vec![1.0, 2.0])]).unwrap_err();
    assert!(matches!(err, crate::Error::Usage(_)));
}

#[test]
fn non_finite_intermediate_is_numerical_error() {
    let err = grad(|_, p| Ok(p[0].ln().sum()), &[Tensor::vector(vec![-1.0])]).unwrap_err();
    assert!(matches!(err, crate::Error::Numerical(_)));
}

#[test]
fn hvp_of_half_squared_norm_is_identity() {
    let v = Tensor::vector(vec![0.3, -1.7]);
    let hv = hvp(half_sq, &[Tensor::vector(vec![3.0, 4.0])], core::slice::from_ref(&v)).unwrap();
    assert_eq!(hv[0].data(), v.data());
}

#[test]
fn hvp_of_quadratic_form() {
    // f = 0.5 w^T A w with A = [[2,1],[1,3]]
    let f = scalar_fn(|t, p| {
        let a = t.constant(Tensor::matrix(2, 2, vec![2.0, 1.0, 1.0, 3.0])?);
        let w = p[0].reshape(&[2, 1]);
        Ok(w.matmul_t(a.matmul(w), true, false).sum().scale(0.5))
    });
    let w = [Tensor::vector(vec![0.4, -0.9])];
    let v = [Tensor::vector(vec![1.0, 0.0])];
    let hv = hvp(f, &w, &v).unwrap();
    let oracle = fd_hvp(&f, &w, &v, 1e-5);
    assert!(rel(hv[0].data(), &oracle) < 1e-8);
    assert!((hv[0].data()[0] - 2.0).abs() < 1e-12);
    assert!((hv[0].data()[1] - 1.0).abs() < 1e-12);
}

#[test]
fn hvp_with_zero_direction_is_zero() {
    let f = scalar_fn(|_, p| { Ok(p[0].exp().sum()) });
    let hv = hvp(f, &[Tensor::vector(vec![0.1, 0.2])], &[Tensor::zeros(&[2])]).unwrap();
    assert_eq!(hv[0].data(), &[0.0, 0.0]);
}

#[test]
fn hvp_shape_mismatch_is_usage_error() {
    let err = hvp(half_sq, &[Tensor::vector(vec![1.0, 2.0])], &[Tensor::zeros(&[3])]).unwrap_err();
    assert!(matches!(err, crate::Error::Usage(_)));
}

#[test]
fn finite_diff_quadratic_and_constant() {
    let p = [Tensor::vector(vec![0.3, -2.0, 5.0])];
    assert!(finite_diff_check(half_sq, &p, 1e-5).unwrap() < 1e-8);
    assert_eq!(finite_diff_check(|t, _| Ok(t.scalar(1.5)), &p, 1e-5).unwrap(), 0.0);
    assert!(finite_diff_check(half_sq, &p, 0.0).is_err());
}

/// Every primitive, composed into a scalar, against central differences
/// and against finite differences of its gradient.
#[test]
fn every_primitive_first_and_second_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&mut rng, &[3, 4], 0.2, 1.5);
    let b = random_tensor(&mut rng, &[4, 2], -1.0, 1.0);
    let c = random_tensor(&mut rng, &[3, 4], 0.2, 1.5);
    let params = [a, b, c];

    macro_rules! check {
        ($name:expr, $body:expr) => {{
            let f = $body;
            let fd = finite_diff_check(&f, &params, 1e-5).unwrap();
            assert!(fd < 1e-6, "{}: gradient rel err {}", $name, fd);
            let v: Vec<Tensor> = params
                .iter()
                .map(|p| random_tensor(&mut rng, p.shape(), -1.0, 1.0))
                .collect();
            let hv: Vec<f64> = hvp(&f, &params, &v)
                .unwrap()
                .iter()
                .flat_map(|t| t.data().to_vec())
                .collect();
            let oracle = fd_hvp(&f, &params, &v, 1e-5);
            let e = rel(&hv, &oracle);
            assert!(e < 1e-5, "{}: hvp rel err {}", $name, e);
        }};
    }

    check!("matmul", scalar_fn(|_, p| {
        Ok(p[0].matmul(p[1]).square().sum())
    }));
    check!("matmul_tn", scalar_fn(|_, p| {
        Ok(p[0].matmul_t(p[2], true, false).square().sum())
    }));
    check!("matmul_nt", scalar_fn(|_, p| {
        Ok(p[0].matmul_t(p[2], false, true).square().sum())
    }));
    check!("matmul_tt", scalar_fn(|_, p| {
        Ok(p[1].matmul_t(p[0], true, true).square().sum())
    }));
    check!("add_sub_mul_neg", scalar_fn(|_, p| {
        Ok(((p[0] + p[2]) * (p[0] - p[2]) * -p[0]).sum())
    }));
    check!("scale_offset", scalar_fn(|_, p| {
        Ok((p[0].scale(1.7).offset(0.3) * p[2]).square().mean())
    }));
    check!("exp_log_recip", scalar_fn(|_, p| {
        Ok((p[0].exp() + p[2].ln() * p[0].recip()).sum())
    }));
    check!("broadcast_sum", scalar_fn(|_, p| {
        let r = p[0].sum_rows().broadcast_rows(3);
        let c = p[2].sum_cols().broadcast_cols(4);
        Ok((r * c * p[0]).sum())
    }));
    check!("expand", scalar_fn(|_, p| {
        let s = p[1].sum().expand(&[3, 4]);
        Ok((s * p[0] * s).sum())
    }));
    check!("leaky_abs", scalar_fn(|_, p| {
        Ok((p[1].leaky_relu(0.01) * p[1]).sum() + (p[1].abs() * p[1].abs() * p[1]).sum())
    }));
    check!("slices_pads", scalar_fn(|_, p| {
        let s = p[0].slice(2, &[5]);
        let q = s.pad(1, &[8]).reshape(&[4, 2]);
        let cols = p[0].slice_cols(1, 2).pad_cols(1, 4);
        Ok((q * p[1] * p[1]).sum() + (cols * p[2] * p[0]).sum() + p[0].slice_rows(1, 2).square().sum())
    }));
    check!("concat", scalar_fn(|t, p| {
        let m = t.concat_cols(&[p[0], p[1].slice(0, &[3, 1])]);
        let r = t.concat_rows(&[p[0], p[2]]);
        Ok(m.square().sum() + (r * r * r).sum())
    }));
    check!("gather_scatter", scalar_fn(|_, p| {
        let idx = Rc::new(vec![0, 3, 1]);
        let g = p[0].gather(idx.clone());
        let s = (g * g).scatter(idx, 4);
        Ok((s * p[2]).sum() + g.exp().sum())
    }));
    check!("logsumexp_softmax", scalar_fn(|_, p| {
        let l = p[0].logsumexp_rows();
        let s = p[2].softmax_rows();
        Ok((l * l).sum() + (s * p[0]).sum() + p[0].log_softmax_rows().sum())
    }));
}

#[test]
fn gradients_are_bit_identical_across_replays() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = [random_tensor(&mut rng, &[5, 7], -1.0, 1.0), random_tensor(&mut rng, &[7, 3], -1.0, 1.0)];
    let f = scalar_fn(|_, p| {
        Ok(p[0].matmul(p[1]).leaky_relu(0.01).logsumexp_rows().sum())
    });
    let (_, g1) = grad(f, &p).unwrap();
    let (_, g2) = grad(f, &p).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn gradients_of_unused_leaves_are_zero() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.leaf(Tensor::vector(vec![3.0]));
    let y = a.sq_norm();
    let g = tape.grad(y, &[a, b]).unwrap();
    assert_eq!(g[1].to_vec(), vec![0.0]);
    assert!(!tape.constant(Tensor::scalar(1.0)).requires_grad());
}

#[test]
fn directional_check_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = [random_tensor(&mut rng, &[6], 0.5, 1.0)];
    let d = [random_tensor(&mut rng, &[6], -1.0, 1.0)];
    let e = directional_diff_check(|_, p| Ok(p[0].ln().square().sum()), &p, &d, 1e-5).unwrap();
    assert!(e < 1e-8);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn hvp_is_linear_in_direction(
            w in proptest::collection::vec(-1.0f64..1.0, 4),
            v1 in proptest::collection::vec(-1.0f64..1.0, 4),
            v2 in proptest::collection::vec(-1.0f64..1.0, 4),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let f = scalar_fn(|_, p| {
                let x = p[0];
                Ok((x.exp() * x).sum() + x.sq_norm().square())
            });
            let p = [Tensor::vector(w)];
            let h1 = hvp(f, &p, &[Tensor::vector(v1.clone())]).unwrap();
            let h2 = hvp(f, &p, &[Tensor::vector(v2.clone())]).unwrap();
            let combo: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| alpha * a + beta * b).collect();
            let h = hvp(f, &p, &[Tensor::vector(combo)]).unwrap();
            for i in 0..4 {
                let expected = alpha * h1[0].data()[i] + beta * h2[0].data()[i];
                prop_assert!((h[0].data()[i] - expected).abs() < 1e-9 * (1.0 + expected.abs()));
            }
        }
    }
}
