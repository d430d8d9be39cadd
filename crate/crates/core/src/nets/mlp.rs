use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffcore::{gemm, Var};
use crate::rng::{self, Rng};

/// Negative slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.01;

/// A named parameter tensor inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Multilayer perceptron with leaky-ReLU hidden layers whose parameters
/// live at `offset` inside a larger flat vector. Weights are stored
/// `[inputs, outputs]` row-major so a batch `[rows, inputs]` multiplies
/// from the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    name: String,
    dims: Vec<usize>,
    offset: usize,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize], offset: usize) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self { name: name.into(), dims: dims.to_vec(), offset }
    }

    /// Two hidden layers of width `hidden`.
    pub fn two_hidden(name: &str, input: usize, hidden: usize, output: usize, offset: usize) -> Self {
        Self::new(name, &[input, hidden, hidden, output], offset)
    }

    pub fn input(&self) -> usize {
        self.dims[0]
    }

    pub fn output(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.dims.windows(2).map(|d| d[0] * d[1] + d[1]).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn end(&self) -> usize {
        self.offset + self.len()
    }

    /// `(weight offset, bias offset)` of layer `l`.
    fn layer_at(&self, l: usize) -> (usize, usize) {
        let mut at = self.offset;
        for d in self.dims.windows(2).take(l) {
            at += d[0] * d[1] + d[1];
        }
        (at, at + self.dims[l] * self.dims[l + 1])
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        for l in 0..self.layers() {
            let (w, b) = self.layer_at(l);
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            out.push(Segment { name: alloc::format!("{}.{}.weight", self.name, l), shape: vec![i, o], offset: w });
            out.push(Segment { name: alloc::format!("{}.{}.bias", self.name, l), shape: vec![o], offset: b });
        }
        out
    }

    /// Orthogonal weights, zero biases.
    pub fn init(&self, params: &mut [f64], rng: &mut Rng) {
        for l in 0..self.layers() {
            let (w, b) = self.layer_at(l);
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            params[w..w + i * o].copy_from_slice(&orthogonal(i, o, rng));
            params[b..b + o].iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Recorded forward pass. `params` is the whole flat vector; `x` is
    /// `[rows, input]`.
    pub fn forward<'t>(&self, params: Var<'t>, x: Var<'t>) -> Var<'t> {
        let rows = x.rows();
        let mut h = x;
        for l in 0..self.layers() {
            let (w, b) = self.layer_at(l);
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let weight = params.slice(w, &[i, o]);
            let bias = params.slice(b, &[o]);
            h = h.matmul(weight) + bias.broadcast_rows(rows);
            if l + 1 < self.layers() {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        h
    }

    /// Unrecorded forward pass on a `[rows, input]` batch.
    pub fn eval(&self, params: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.input());
        let mut h = x.to_vec();
        for l in 0..self.layers() {
            let (w, b) = self.layer_at(l);
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let bias = &params[b..b + o];
            let mut out = Vec::with_capacity(rows * o);
            for _ in 0..rows {
                out.extend_from_slice(bias);
            }
            gemm(rows, i, o, &h, false, &params[w..w + i * o], false, &mut out, true);
            if l + 1 < self.layers() {
                out.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v *= LEAKY_SLOPE
                    }
                });
            }
            h = out;
        }
        h
    }
}

/// Row-major `[rows, cols]` matrix whose rows (if `rows <= cols`) or
/// columns (otherwise) are orthonormal.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> Vec<f64> {
    let (n, k) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // k orthonormal vectors of length n via modified Gram-Schmidt,
    // re-orthogonalized once for accuracy.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng::normal(rng)).collect();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, q) in basis.iter().enumerate() {
        for (i, &x) in q.iter().enumerate() {
            if rows >= cols {
                out[i * cols + j] = x;
            } else {
                out[j * cols + i] = x;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, scalar_fn, Tape, Tensor};

    fn gram(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        // product over the smaller dimension
        let k = rows.min(cols);
        let mut g = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                g[a * k + b] = if rows >= cols {
                    (0..rows).map(|i| m[i * cols + a] * m[i * cols + b]).sum()
                } else {
                    (0..cols).map(|j| m[a * cols + j] * m[b * cols + j]).sum()
                };
            }
        }
        g
    }

    #[test]
    fn orthogonal_init_is_orthonormal() {
        let mut rng = rng::seeded(1);
        for &(r, c) in &[(13, 128), (128, 128), (128, 8), (5, 5), (1, 4)] {
            let m = orthogonal(r, c, &mut rng);
            let g = gram(&m, r, c);
            let k = r.min(c);
            for a in 0..k {
                for b in 0..k {
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((g[a * k + b] - want).abs() < 1e-6, "{}x{}", r, c);
                }
            }
        }
    }

    #[test]
    fn layout_and_segments() {
        let mlp = Mlp::two_hidden("enc", 4, 6, 2, 10);
        assert_eq!(mlp.len(), 4 * 6 + 6 + 36 + 6 + 12 + 2);
        let segs = mlp.segments();
        assert_eq!(segs.len(), 6);
        assert_eq!(segs[0].offset, 10);
        assert_eq!(segs[5].range().end, mlp.end());
        assert_eq!(segs[2].name, "enc.1.weight");
    }

    #[test]
    fn eval_matches_recorded_forward() {
        let mlp = Mlp::two_hidden("m", 3, 16, 2, 0);
        let mut rng = rng::seeded(2);
        let mut p = vec![0.0; mlp.len()];
        mlp.init(&mut p, &mut rng);
        p.iter_mut().for_each(|x| *x += 0.05 * rng::normal(&mut rng));
        let x: Vec<f64> = (0..15).map(|_| rng::normal(&mut rng)).collect();
        let fast = mlp.eval(&p, &x, 5);
        let tape = Tape::new();
        let pv = tape.constant(Tensor::vector(p));
        let xv = tape.constant(Tensor::matrix(5, 3, x).unwrap());
        let slow = mlp.forward(pv, xv).to_vec();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mlp = Mlp::two_hidden("m", 3, 4, 2, 0);
        let mut p = vec![0.0; mlp.len()];
        let n = p.len();
        p[n - 2] = 0.5;
        p[n - 1] = -1.5;
        assert_eq!(mlp.eval(&p, &[1.0, 2.0, 3.0], 1), vec![0.5, -1.5]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mlp = Mlp::new("m", &[3, 8, 8, 8, 1], 0);
        let mut rng = rng::seeded(3);
        let mut p = vec![0.0; mlp.len()];
        mlp.init(&mut p, &mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng::normal(&mut rng)).collect();
        let f = scalar_fn(|t, v| {
            let xs = t.constant(Tensor::matrix(4, 3, x.clone())?);
            Ok(mlp.forward(v[0], xs).square().mean())
        });
        let err = finite_diff_check(f, &[Tensor::vector(p)], 1e-5).unwrap();
        assert!(err < 1e-4, "{}", err);
    }
}
