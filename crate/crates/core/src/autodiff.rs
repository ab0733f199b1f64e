//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products into the inputs.
//! Nodes are created in execution order, so the tape is topologically sorted
//! by construction.

use std::sync::Arc;

use crate::error::TensorError;
use crate::kernels;
use crate::tensor::{inverse_permutation, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    ExpandLeading(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    LeakyRelu(Var, T),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Roll(Var, Vec<i64>),
    Slice(Var, usize, usize),
    Concat(Vec<Var>, usize),
    Softmax(Var, usize),
    LayerNorm(Var, Var, Var, T),
    Conv3d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Gather(Var, Arc<Vec<usize>>),
    Resize(Var),
    L1(Var, Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph. Single-writer: one thread records and runs
/// backward.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn finite<T: Scalar>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        let value = finite(op_name, value)?;
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]`. Batch dims must
    /// match, or one operand is a plain matrix broadcast over the other's
    /// batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = *xv.shape().last().unwrap_or(&1);
        if bv.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Result<Var, TensorError> {
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "expand_leading",
                msg: "zero repeats".into(),
            });
        }
        let xv = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let mut data = Vec::with_capacity(n * xv.len());
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::from_parts(shape, data);
        self.push("expand_leading", out, Op::ExpandLeading(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / T::from_f64(xv.len() as f64));
        self.push("mean", out, Op::Mean(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| T::from_f64(kernels::gelu(v.as_f64())));
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var, TensorError> {
        let out = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { v * slope });
        self.push("leaky_relu", out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).permute(perm)?;
        self.push("permute", out, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Cyclic shift with one signed shift per axis.
    pub fn roll(&mut self, x: Var, shifts: &[i64]) -> Result<Var, TensorError> {
        let out = self.value(x).roll(shifts)?;
        self.push("roll", out, Op::Roll(x, shifts.to_vec()), &[x])
    }

    /// Cyclic shift of the three leading spatial axes of a token grid.
    pub fn roll3d(&mut self, x: Var, shifts: [i64; 3]) -> Result<Var, TensorError> {
        let rank = self.value(x).rank();
        if rank < 3 {
            return Err(TensorError::InvalidArgument {
                op: "roll3d",
                msg: format!("needs rank >= 3, got {rank}"),
            });
        }
        let mut all = vec![0; rank];
        all[..3].copy_from_slice(&shifts);
        self.roll(x, &all)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let out = self.value(x).slice(axis, start, end)?;
        self.push("slice", out, Op::Slice(x, axis, start), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&parts, axis)?;
        self.push("concat", out, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let out = kernels::softmax(self.value(x), axis)?;
        self.push("softmax", out, Op::Softmax(x, axis), &[x])
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, TensorError> {
        let out = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push("layer_norm", out, Op::LayerNorm(x, gamma, beta, eps), &[x, gamma, beta])
    }

    /// Cross-correlation of a `[C_in, H, W, D]` volume with a
    /// `[C_out, C_in, k, k, k]` kernel.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let out = kernels::conv3d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        self.push("conv3d", out, Op::Conv3d { x, w, b, stride, pad }, &[x, w, b])
    }

    /// Row lookup: `out[i] = table[indices[i]]` for a 2D `table`.
    pub fn gather_rows(&mut self, table: Var, indices: Arc<Vec<usize>>) -> Result<Var, TensorError> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("table must be 2D, got {:?}", tv.shape()),
            });
        }
        let (rows, cols) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            if i >= rows {
                return Err(TensorError::InvalidArgument {
                    op: "gather_rows",
                    msg: format!("index {i} out of range for {rows} rows"),
                });
            }
            data.extend_from_slice(&tv.data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::from_parts(vec![indices.len(), cols], data);
        self.push("gather_rows", out, Op::Gather(table, indices), &[table])
    }

    /// Trilinear (align-corners-false) resize of a `[C, H, W, D]` tensor.
    pub fn trilinear_resize(&mut self, x: Var, target: [usize; 3]) -> Result<Var, TensorError> {
        let out = kernels::trilinear_resize(self.value(x), target)?;
        self.push("trilinear_resize", out, Op::Resize(x), &[x])
    }

    /// Mean absolute error. The subgradient at ties is zero.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (p, t) = (self.value(pred), self.value(target));
        p.expect_same_shape("l1_loss", t)?;
        let s: T = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let out = Tensor::scalar(s / T::from_f64(p.len() as f64));
        self.push("l1_loss", out, Op::L1(pred, target), &[pred, target])
    }

    /// Runs reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::DetachedGraph);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (input, gin) in self.vjp(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &d) in acc.data_mut().iter_mut().zip(gin.data()) {
                            *a = *a + d;
                        }
                    }
                    slot @ None => *slot = Some(gin),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (da, db) = kernels::matmul_backward(self.value(*a), self.value(*b), g, self.needs(*a), self.needs(*b));
                out.extend(da.map(|t| (*a, t)));
                out.extend(db.map(|t| (*b, t)));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.zip_map(self.value(*b), |x, y| x * y).expect("same shape")));
                }
                if self.needs(*b) {
                    out.push((*b, g.zip_map(self.value(*a), |x, y| x * y).expect("same shape")));
                }
            }
            Op::Scale(x, s) => out.push((*x, g.map(|v| v * *s))),
            Op::AddBias(x, b) => {
                out.push((*x, g.clone()));
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    out.push((*b, Tensor::from_parts(vec![c], db)));
                }
            }
            Op::ExpandLeading(x) => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.len()];
                for chunk in g.data().chunks(xv.len()) {
                    for (d, &v) in dx.iter_mut().zip(chunk) {
                        *d = *d + v;
                    }
                }
                out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(self.shape(*x), g.item()))),
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).len() as f64);
                out.push((*x, Tensor::full(self.shape(*x), g.item() / n)));
            }
            Op::Gelu(x) => {
                let dx = g
                    .zip_map(self.value(*x), |gv, xv| gv * T::from_f64(kernels::gelu_grad(xv.as_f64())))
                    .expect("same shape");
                out.push((*x, dx));
            }
            Op::LeakyRelu(x, slope) => {
                let dx = g
                    .zip_map(self.value(*x), |gv, xv| if xv >= T::zero() { gv } else { gv * *slope })
                    .expect("same shape");
                out.push((*x, dx));
            }
            Op::Reshape(x) => out.push((*x, g.reshape(self.shape(*x)).expect("same size"))),
            Op::Permute(x, perm) => {
                out.push((*x, g.permute(&inverse_permutation(perm)).expect("valid permutation")))
            }
            Op::Roll(x, shifts) => {
                let neg: Vec<i64> = shifts.iter().map(|s| -s).collect();
                out.push((*x, g.roll(&neg).expect("same rank")));
            }
            Op::Slice(x, axis, start) => {
                let xs = self.shape(*x);
                let (outer, len, inner) = (
                    xs[..*axis].iter().product::<usize>(),
                    xs[*axis],
                    xs[*axis + 1..].iter().product::<usize>(),
                );
                let width = g.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let src = &g.data()[o * width * inner..(o + 1) * width * inner];
                    let dst = o * len * inner + start * inner;
                    dx[dst..dst + width * inner].copy_from_slice(src);
                }
                out.push((*x, Tensor::from_parts(xs.to_vec(), dx)));
            }
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for &x in xs {
                    let w = self.shape(x)[*axis];
                    out.push((x, g.slice(*axis, start, start + w).expect("in range")));
                    start += w;
                }
            }
            Op::Softmax(x, axis) => out.push((*x, kernels::softmax_backward(&node.value, g, *axis))),
            Op::LayerNorm(x, gamma, beta, eps) => {
                let (dx, dg, db) = kernels::layer_norm_backward(self.value(*x), self.value(*gamma), g, *eps);
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Conv3d { x, w, b, stride, pad } => {
                let grads = kernels::conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    [self.needs(*x), self.needs(*w), self.needs(*b)],
                );
                out.extend(grads.dx.map(|t| (*x, t)));
                out.extend(grads.dw.map(|t| (*w, t)));
                out.extend(grads.db.map(|t| (*b, t)));
            }
            Op::Gather(table, indices) => {
                let tv = self.value(*table);
                let cols = tv.shape()[1];
                let mut dt = vec![T::zero(); tv.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dt[i * cols + c] = dt[i * cols + c] + g.data()[r * cols + c];
                    }
                }
                out.push((*table, Tensor::from_parts(tv.shape().to_vec(), dt)));
            }
            Op::Resize(x) => out.push((*x, kernels::trilinear_resize_backward(g, self.shape(*x)))),
            Op::L1(pred, target) => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = g.item() / T::from_f64(p.len() as f64);
                let sign = p
                    .zip_map(t, |a, b| {
                        if a > b {
                            scale
                        } else if a < b {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .expect("same shape");
                if self.needs(*target) {
                    out.push((*target, sign.map(|v| -v)));
                }
                out.push((*pred, sign));
            }
        }
        out
    }
}

/// Central-difference gradient estimate of a scalar function:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// Max-norm relative error between an analytic and a numeric gradient:
/// `max|a − b| / max(max|a|, max|b|)`.
pub fn grad_rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic.max_abs_diff(numeric) / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let r = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(r).shape(), &[2, 1]);
        assert_eq!(tape.value(r).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_gives_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 10.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(c).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), TensorError::DetachedGraph);
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4]));
        let s = tape.softmax(z, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);
        let x = tape.constant(t(&[2], &[0.0, std::f64::consts::LN_2]));
        let s = tape.softmax(x, 0).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
        let g3 = tape.constant(Tensor::ones(&[3]));
        let b3 = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(t(&[1, 3], &[7.0, 7.0, 7.0]));
        let y = tape.layer_norm(c, g3, b3, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.2, 2.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert_eq!(tape.scale(x, 10.0).unwrap_err(), TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn l1_loss_cases() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2], &[1.0, 1.0]));
        let q = tape.constant(t(&[2], &[0.0, 2.0]));
        let l = tape.l1_loss(p, q).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.5, -0.5]);
        let same = tape.l1_loss(p, p).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn finite_diff_polynomial() {
        let x = t(&[1], &[3.0]);
        let g = finite_diff_grad(|v| v.data()[0] * v.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
        let x = t(&[3], &[0.3, -1.0, 2.0]);
        let g = finite_diff_grad(|v| v.sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
