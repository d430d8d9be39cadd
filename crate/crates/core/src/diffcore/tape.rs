use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, Ref, RefCell};
use core::ops::{Add, Mul, Neg, Sub};

use super::tensor::{gemm, Tensor};
use crate::error::{numerical, usage};
use crate::Result;

/// Recorded primitive. Indices refer to earlier nodes on the same tape.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    BroadcastRows(usize),
    BroadcastCols(usize),
    Expand(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    /// Elementwise product with a fixed mask. Every piecewise-linear
    /// primitive (leaky ReLU, ReLU, abs) is one of these.
    Masked(usize, Rc<Vec<f64>>),
    Slice { src: usize, offset: usize },
    Pad { src: usize, offset: usize },
    SliceCols { src: usize, start: usize },
    PadCols { src: usize, start: usize },
    ConcatCols(Rc<Vec<usize>>),
    ConcatFlat(Rc<Vec<usize>>),
    Gather { src: usize, idx: Rc<Vec<usize>> },
    Scatter { src: usize, idx: Rc<Vec<usize>> },
    Reshape(usize),
    /// Sum of parts placed at flat offsets inside zeros.
    Assemble(Rc<Vec<(usize, usize)>>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A computation record. Operations on [`Var`]s append nodes in
/// topological order; [`Tape::grad`] walks them backwards and records the
/// backward pass on the same tape, so gradients can be differentiated again.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    first_non_finite: Cell<Option<usize>>,
    kink_margin: Cell<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            first_non_finite: Cell::new(None),
            kink_margin: Cell::new(f64::INFINITY),
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Tensor::scalar(x))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Errors if any recorded value so far contains NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite.get() {
            Some(id) => Err(numerical!("non-finite value produced at tape node {}", id)),
            None => Ok(()),
        }
    }

    /// Smallest |input| seen by a kinked primitive (leaky ReLU, ReLU, abs).
    /// Finite-difference probes use this to stay away from kinks.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin.get()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.first_non_finite.get().is_none() && !value.is_finite() {
            self.first_non_finite.set(Some(id));
        }
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn unary(&self, src: usize, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'_> {
        let value = f(&self.value(src));
        let needs = self.needs(src);
        self.push(value, op, needs)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Tensor,
    ) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    fn track_kinks(&self, x: &[f64]) {
        let m = x.iter().fold(self.kink_margin.get(), |m, v| m.min(v.abs()));
        self.kink_margin.set(m);
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[ids[0]].value.rows();
            let widths: Vec<usize> = ids.iter().map(|&i| nodes[i].value.cols()).collect();
            let total: usize = widths.iter().sum();
            let mut out = vec![0.0; rows * total];
            let mut start = 0;
            for (&i, &w) in ids.iter().zip(&widths) {
                let v = &nodes[i].value;
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                for r in 0..rows {
                    out[r * total + start..r * total + start + w]
                        .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
                start += w;
            }
            Tensor::from_parts(vec![rows, total], out)
        };
        let needs = ids.iter().any(|&i| self.needs(i));
        self.push(value, Op::ConcatCols(Rc::new(ids)), needs)
    }

    /// Concatenates the flattened data of every part into one vector.
    pub fn concat_flat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::new();
            for &i in &ids {
                out.extend_from_slice(nodes[i].value.data());
            }
            Tensor::vector(out)
        };
        let needs = ids.iter().any(|&i| self.needs(i));
        self.push(value, Op::ConcatFlat(Rc::new(ids)), needs)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let cols = parts[0].cols();
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        for p in parts {
            assert_eq!(p.cols(), cols, "concat_rows column mismatch");
        }
        self.concat_flat(parts).reshape(&[rows, cols])
    }

    /// Reverse-mode gradient of the scalar `y` with respect to `wrt`.
    ///
    /// The backward pass is itself recorded, so the returned gradients can
    /// be combined and differentiated again (Hessian-vector products).
    pub fn grad<'t>(&'t self, y: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if y.len() != 1 {
            return Err(usage!("grad of non-scalar output with shape {:?}", y.shape()));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Var<'t>>> = vec![None; y.id + 1];
        // Gradients of flat slices, merged into one node per source.
        let mut placed: Vec<Vec<(usize, usize)>> = vec![Vec::new(); y.id + 1];
        let seed_shape = y.shape();
        grads[y.id] = Some(self.constant(Tensor::filled(&seed_shape, 1.0)));
        for id in (0..=y.id).rev() {
            if !placed[id].is_empty() {
                let parts = core::mem::take(&mut placed[id]);
                let shape = self.shape_of(id);
                let a = self.assemble(parts, &shape);
                grads[id] = Some(match grads[id] {
                    Some(prev) => prev + a,
                    None => a,
                });
            }
            let Some(g) = grads[id] else { continue };
            let (op, needs) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].needs_grad)
            };
            if !needs {
                continue;
            }
            let this = Var { tape: self, id };
            if let Op::Slice { src, offset } = op {
                placed[src].push((g.id, offset));
                continue;
            }
            self.backward_node(&op, this, g, &mut grads);
        }
        self.check_finite()?;
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&w.shape())),
            })
            .collect())
    }

    fn assemble(&self, parts: Vec<(usize, usize)>, shape: &[usize]) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = Tensor::zeros(shape);
            for &(id, offset) in &parts {
                let src = nodes[id].value.data();
                let dst = &mut out.data_mut()[offset..offset + src.len()];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            out
        };
        let needs = parts.iter().any(|&(id, _)| self.needs(id));
        self.push(value, Op::Assemble(Rc::new(parts)), needs)
    }

    fn backward_node<'t>(
        &'t self,
        op: &Op,
        this: Var<'t>,
        g: Var<'t>,
        grads: &mut [Option<Var<'t>>],
    ) {
        let v = |id: usize| Var { tape: self, id };
        let mut acc = |id: usize, contrib: Var<'t>| {
            grads[id] = Some(match grads[id] {
                Some(prev) => prev + contrib,
                None => contrib,
            });
        };
        match op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g);
                }
                if self.needs(*b) {
                    acc(*b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g);
                }
                if self.needs(*b) {
                    acc(*b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g * v(*b));
                }
                if self.needs(*b) {
                    acc(*b, g * v(*a));
                }
            }
            Op::Neg(a) => acc(*a, -g),
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::Offset(a) => acc(*a, g),
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if self.needs(a) {
                    let da = if ta {
                        v(b).matmul_t(g, tb, true)
                    } else {
                        g.matmul_t(v(b), false, !tb)
                    };
                    acc(a, da);
                }
                if self.needs(b) {
                    let db = if tb {
                        g.matmul_t(v(a), true, ta)
                    } else {
                        v(a).matmul_t(g, !ta, false)
                    };
                    acc(b, db);
                }
            }
            Op::BroadcastRows(src) => acc(*src, g.sum_rows()),
            Op::BroadcastCols(src) => acc(*src, g.sum_cols()),
            Op::Expand(src) => {
                let shape = self.shape_of(*src);
                acc(*src, g.sum().reshape(&shape));
            }
            Op::SumAll(src) => {
                let shape = self.shape_of(*src);
                acc(*src, g.expand(&shape));
            }
            Op::SumRows(src) => {
                let rows = self.shape_of(*src)[0];
                acc(*src, g.broadcast_rows(rows));
            }
            Op::SumCols(src) => {
                let cols = self.shape_of(*src)[1];
                acc(*src, g.broadcast_cols(cols));
            }
            Op::Exp(src) => acc(*src, g * this),
            Op::Log(src) => acc(*src, g * v(*src).recip()),
            Op::Recip(src) => acc(*src, -(g * this * this)),
            Op::Masked(src, mask) => acc(*src, g.masked(mask.clone())),
            Op::Slice { src, offset } => {
                let shape = self.shape_of(*src);
                acc(*src, g.pad(*offset, &shape));
            }
            Op::Pad { src, offset } => {
                let shape = self.shape_of(*src);
                acc(*src, g.slice(*offset, &shape));
            }
            Op::SliceCols { src, start } => {
                let cols = self.shape_of(*src)[1];
                acc(*src, g.pad_cols(*start, cols));
            }
            Op::PadCols { src, start } => {
                let width = self.shape_of(*src)[1];
                acc(*src, g.slice_cols(*start, width));
            }
            Op::ConcatCols(ids) => {
                let mut start = 0;
                for &i in ids.iter() {
                    let w = self.shape_of(i)[1];
                    if self.needs(i) {
                        acc(i, g.slice_cols(start, w));
                    }
                    start += w;
                }
            }
            Op::ConcatFlat(ids) => {
                let mut offset = 0;
                for &i in ids.iter() {
                    let shape = self.shape_of(i);
                    let n: usize = shape.iter().product();
                    if self.needs(i) {
                        acc(i, g.slice(offset, &shape));
                    }
                    offset += n;
                }
            }
            Op::Gather { src, idx } => {
                let cols = self.shape_of(*src)[1];
                acc(*src, g.scatter(idx.clone(), cols));
            }
            Op::Scatter { src, idx } => acc(*src, g.gather(idx.clone())),
            Op::Reshape(src) => {
                let shape = self.shape_of(*src);
                acc(*src, g.reshape(&shape));
            }
            Op::Assemble(parts) => {
                for &(id, offset) in parts.iter() {
                    if self.needs(id) {
                        let shape = self.shape_of(id);
                        acc(id, g.slice(offset, &shape));
                    }
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64, what: &str) -> Tensor {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{} shape mismatch: {:?} vs {:?}",
        what,
        a.shape(),
        b.shape()
    );
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    /// Runs `f` on the value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value(self.id))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.with_value(|t| t.data().to_vec())
    }

    /// The value of a one-element node.
    pub fn item(&self) -> f64 {
        self.with_value(|t| {
            assert_eq!(t.len(), 1, "item() on shape {:?}", t.shape());
            t.data()[0]
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn len(&self) -> usize {
        self.with_value(|t| t.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        self.with_value(|t| t.rows())
    }

    pub fn cols(&self) -> usize {
        self.with_value(|t| t.cols())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Same value, cut off from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Scale(self.id, c), |a| map(a, |x| c * x))
    }

    /// Adds a constant to every entry.
    pub fn offset(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Offset(self.id), |a| map(a, |x| x + c))
    }

    /// `op(self) * op(other)` where `op` optionally transposes.
    pub fn matmul_t(self, other: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            ta,
            tb,
        };
        self.tape.binary(self.id, other.id, op, |a, b| {
            assert_eq!(a.rank(), 2, "matmul lhs must be a matrix");
            assert_eq!(b.rank(), 2, "matmul rhs must be a matrix");
            let (m, k) = if ta {
                (a.cols(), a.rows())
            } else {
                (a.rows(), a.cols())
            };
            let (k2, n) = if tb {
                (b.cols(), b.rows())
            } else {
                (b.rows(), b.cols())
            };
            assert_eq!(k, k2, "matmul inner dimension mismatch");
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), ta, b.data(), tb, &mut out, false);
            Tensor::from_parts(vec![m, n], out)
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_t(other, false, false)
    }

    /// `[c] -> [rows, c]`
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::BroadcastRows(self.id), |a| {
            assert_eq!(a.rank(), 1, "broadcast_rows expects a vector");
            let mut out = Vec::with_capacity(rows * a.len());
            for _ in 0..rows {
                out.extend_from_slice(a.data());
            }
            Tensor::from_parts(vec![rows, a.len()], out)
        })
    }

    /// `[r] -> [r, cols]`
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::BroadcastCols(self.id), |a| {
            assert_eq!(a.rank(), 1, "broadcast_cols expects a vector");
            let mut out = Vec::with_capacity(cols * a.len());
            for &x in a.data() {
                out.extend(core::iter::repeat_n(x, cols));
            }
            Tensor::from_parts(vec![a.len(), cols], out)
        })
    }

    /// One-element tensor repeated into `shape`.
    pub fn expand(self, shape: &[usize]) -> Var<'t> {
        self.tape.unary(self.id, Op::Expand(self.id), |a| {
            assert_eq!(a.len(), 1, "expand expects a single element");
            Tensor::filled(shape, a.data()[0])
        })
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumAll(self.id), |a| {
            Tensor::scalar(a.data().iter().sum())
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over rows: `[r, c] -> [c]`.
    pub fn sum_rows(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumRows(self.id), |a| {
            assert_eq!(a.rank(), 2, "sum_rows expects a matrix");
            let (r, c) = (a.rows(), a.cols());
            let mut out = vec![0.0; c];
            for row in 0..r {
                for (o, x) in out.iter_mut().zip(&a.data()[row * c..(row + 1) * c]) {
                    *o += x;
                }
            }
            Tensor::vector(out)
        })
    }

    /// Sum over columns: `[r, c] -> [r]`.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SumCols(self.id), |a| {
            assert_eq!(a.rank(), 2, "sum_cols expects a matrix");
            let c = a.cols();
            Tensor::vector(a.data().chunks(c.max(1)).map(|row| row.iter().sum()).collect())
        })
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| map(a, libm::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), |a| map(a, libm::log))
    }

    pub fn recip(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Recip(self.id), |a| map(a, |x| 1.0 / x))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    fn masked(self, mask: Rc<Vec<f64>>) -> Var<'t> {
        let op = Op::Masked(self.id, mask.clone());
        self.tape.unary(self.id, op, |a| {
            let data = a.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        })
    }

    /// Leaky ReLU. The derivative at exactly zero is the negative slope.
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let mask: Vec<f64> = self.with_value(|a| {
            self.tape.track_kinks(a.data());
            a.data()
                .iter()
                .map(|&x| if x > 0.0 { 1.0 } else { slope })
                .collect()
        });
        self.masked(Rc::new(mask))
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    /// Absolute value; the derivative at zero is taken as zero.
    pub fn abs(self) -> Var<'t> {
        let mask: Vec<f64> = self.with_value(|a| {
            self.tape.track_kinks(a.data());
            a.data()
                .iter()
                .map(|&x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        });
        self.masked(Rc::new(mask))
    }

    /// Flat window of `shape.product()` entries starting at `offset`.
    pub fn slice(self, offset: usize, shape: &[usize]) -> Var<'t> {
        self.tape.unary(self.id, Op::Slice { src: self.id, offset }, |a| {
            let n: usize = shape.iter().product();
            assert!(offset + n <= a.len(), "slice out of range");
            Tensor::from_parts(shape.to_vec(), a.data()[offset..offset + n].to_vec())
        })
    }

    /// Places this tensor's data at `offset` inside zeros of `shape`.
    pub fn pad(self, offset: usize, shape: &[usize]) -> Var<'t> {
        self.tape.unary(self.id, Op::Pad { src: self.id, offset }, |a| {
            let mut out = Tensor::zeros(shape);
            assert!(offset + a.len() <= out.len(), "pad out of range");
            out.data_mut()[offset..offset + a.len()].copy_from_slice(a.data());
            out
        })
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(self, start: usize, count: usize) -> Var<'t> {
        let cols = self.cols();
        self.slice(start * cols, &[count, cols])
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(self, start: usize, width: usize) -> Var<'t> {
        self.tape
            .unary(self.id, Op::SliceCols { src: self.id, start }, |a| {
                let (r, c) = (a.rows(), a.cols());
                assert!(start + width <= c, "slice_cols out of range");
                let mut out = Vec::with_capacity(r * width);
                for row in 0..r {
                    out.extend_from_slice(&a.data()[row * c + start..row * c + start + width]);
                }
                Tensor::from_parts(vec![r, width], out)
            })
    }

    /// Embeds the columns of this matrix at `start` in a `total`-column zero matrix.
    pub fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::PadCols { src: self.id, start }, |a| {
            let (r, w) = (a.rows(), a.cols());
            assert!(start + w <= total, "pad_cols out of range");
            let mut out = vec![0.0; r * total];
            for row in 0..r {
                out[row * total + start..row * total + start + w]
                    .copy_from_slice(&a.data()[row * w..(row + 1) * w]);
            }
            Tensor::from_parts(vec![r, total], out)
        })
    }

    /// Picks `self[r, idx[r]]` for every row: `[r, c] -> [r]`.
    pub fn gather(self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let op = Op::Gather {
            src: self.id,
            idx: idx.clone(),
        };
        self.tape.unary(self.id, op, |a| {
            let c = a.cols();
            assert_eq!(idx.len(), a.rows(), "gather index count");
            Tensor::vector(
                idx.iter()
                    .enumerate()
                    .map(|(r, &j)| {
                        assert!(j < c, "gather index out of range");
                        a.data()[r * c + j]
                    })
                    .collect(),
            )
        })
    }

    /// Inverse of [`Var::gather`]: `[r] -> [r, cols]` with one entry per row.
    pub fn scatter(self, idx: Rc<Vec<usize>>, cols: usize) -> Var<'t> {
        let op = Op::Scatter {
            src: self.id,
            idx: idx.clone(),
        };
        self.tape.unary(self.id, op, |a| {
            assert_eq!(idx.len(), a.len(), "scatter index count");
            let mut out = vec![0.0; a.len() * cols];
            for (r, (&j, &x)) in idx.iter().zip(a.data()).enumerate() {
                out[r * cols + j] = x;
            }
            Tensor::from_parts(vec![a.len(), cols], out)
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        self.tape.unary(self.id, Op::Reshape(self.id), |a| {
            a.clone().reshape(shape).expect("reshape size mismatch")
        })
    }

    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        (self * other).sum()
    }

    pub fn sq_norm(self) -> Var<'t> {
        self.dot(self)
    }

    /// Row-wise log-sum-exp with max subtraction: `[r, c] -> [r]`.
    pub fn logsumexp_rows(self) -> Var<'t> {
        let cols = self.cols();
        let maxes: Vec<f64> = self.with_value(|a| {
            a.data()
                .chunks(cols)
                .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        });
        let m = self.tape.constant(Tensor::vector(maxes));
        let shifted = self - m.broadcast_cols(cols);
        shifted.exp().sum_cols().ln() + m
    }

    /// Row-wise log-softmax: `[r, c] -> [r, c]`.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let cols = self.cols();
        self - self.logsumexp_rows().broadcast_cols(cols)
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.log_softmax_rows().exp()
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Add(self.id, rhs.id), |a, b| {
            zip_map(a, b, |x, y| x + y, "add")
        })
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Sub(self.id, rhs.id), |a, b| {
            zip_map(a, b, |x, y| x - y, "sub")
        })
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Mul(self.id, rhs.id), |a, b| {
            zip_map(a, b, |x, y| x * y, "mul")
        })
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Neg(self.id), |a| map(a, |x| -x))
    }
}
