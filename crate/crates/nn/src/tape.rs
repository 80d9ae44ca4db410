//! Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! output value and the handles of its parents. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid reverse
//! topological order; [`Tape::backward`] does exactly that and accumulates
//! each parent's gradient additively.
//!
//! ```
//! use socialdrive_nn::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.input_with_grad(Tensor::from_f64(1, 2, &[3.0, -1.0]));
//! let y = tape.mul(x, x).unwrap();
//! let s = tape.sum(y);
//! let grads = tape.backward(s);
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0, -2.0]);
//! ```

use std::cmp::Ordering;

use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, T, T),
    Minimum(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Reshape(Var),
    GroupScores(Var, Var),
    GroupMix(Var, Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Clamp(..) => "clamp",
            Op::Minimum(..) => "minimum",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SelectRows(..) => "select_rows",
            Op::PickCols(..) => "pick_cols",
            Op::RowSum(_) => "row_sum",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Mse(..) => "mse",
            Op::Reshape(_) => "reshape",
            Op::GroupScores(..) => "group_scores",
            Op::GroupMix(..) => "group_mix",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Sum that does not depend on the order of `terms`.
fn sorted_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    terms.iter().fold(T::zero(), |acc, &x| acc + x)
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T], scratch: &mut Vec<T>) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
    }
    scratch.clear();
    scratch.extend_from_slice(out);
    let total = sorted_sum(scratch);
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Recorded forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds every parameter gradient into the matching `store` slot.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>) {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.grad_mut(*id).add_assign(g);
            }
        }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// `(op, output shape)` per node, in recording order.
    pub fn summary(&self) -> Vec<(&'static str, Vec<usize>)> {
        self.nodes
            .iter()
            .map(|n| (n.op.name(), n.value.shape().to_vec()))
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// An input whose gradient is tracked (for input-sensitivity checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(v, op, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    /// `x + bias` with `bias: 1 × cols` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(bias) != (1, c) {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone().reshape(vec![r, c])?;
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant (non-differentiable) tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err("mul_const", self.shape(x), c.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MulConst(x, c), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        Ok(self.zip(a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a, b)))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let src = self.value(x);
        let mut out = vec![T::zero(); r * c];
        let mut scratch = Vec::with_capacity(c);
        for (row, o) in src.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(row, o, &mut scratch);
        }
        let out = Tensor::new(src.shape().to_vec(), out).expect("shape");
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (_, c) = self.dims(x);
        let src = self.value(x);
        let mut out = Vec::with_capacity(src.len());
        let mut scratch = Vec::with_capacity(c);
        for row in src.data().chunks(c) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            scratch.clear();
            scratch.extend(row.iter().map(|&v| (v - max).exp()));
            let lse = max + sorted_sum(&mut scratch).ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new(src.shape().to_vec(), out).expect("shape");
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NnError::Invalid("concat of zero tensors".into()))?;
        let rows = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::matrix(rows, total, out),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NnError::Invalid("concat of zero tensors".into()))?;
        let cols = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::matrix(rows, cols, out),
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&src.row(row)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(r, len, out), Op::SliceCols(x, start), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(len, c, out), Op::SliceRows(x, start), ng))
    }

    /// Gathers rows by index (indices may repeat).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(shape_err("select_rows", self.shape(x), idx));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::matrix(idx.len(), c, out),
            Op::SelectRows(x, idx.to_vec()),
            ng,
        ))
    }

    /// `out[i] = x[i, idx[i]]`, shape `rows × 1`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(shape_err("pick_cols", self.shape(x), idx));
        }
        let src = self.value(x);
        let out = idx.iter().enumerate().map(|(row, &j)| src.at(row, j)).collect();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::matrix(r, 1, out),
            Op::PickCols(x, idx.to_vec()),
            ng,
        ))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .map(|row| row.iter().fold(T::zero(), |a, &b| a + b))
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::matrix(r, 1, out), Op::RowSum(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().fold(T::zero(), |a, &b| a + b) / T::lit(v.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
            / T::lit(va.len() as f64);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Per-sample dot products for grouped attention.
    ///
    /// `q: B × d`, `k: (B·N) × d` → `B × N` with `out[b, i] = q[b]·k[b·N + i]`.
    pub fn group_scores(&mut self, q: Var, k: Var) -> Result<Var> {
        let (b, d) = self.dims(q);
        let (bn, d2) = self.dims(k);
        if d != d2 || bn % b != 0 {
            return Err(shape_err("group_scores", self.shape(q), self.shape(k)));
        }
        let n = bn / b;
        let vq = self.value(q);
        let vk = self.value(k);
        let mut out = Vec::with_capacity(bn);
        for s in 0..b {
            let qr = vq.row(s);
            for i in 0..n {
                let kr = vk.row(s * n + i);
                out.push(qr.iter().zip(kr).fold(T::zero(), |a, (&x, &y)| a + x * y));
            }
        }
        let ng = self.ng(q) || self.ng(k);
        Ok(self.push(Tensor::matrix(b, n, out), Op::GroupScores(q, k), ng))
    }

    /// Per-sample weighted row sums: `w: B × N`, `v: (B·N) × d` → `B × d`.
    ///
    /// Each output entry is summed in value order, so permuting the rows of a
    /// group (with their weights) reproduces the output bit for bit.
    pub fn group_mix(&mut self, w: Var, v: Var) -> Result<Var> {
        let (b, n) = self.dims(w);
        let (bn, d) = self.dims(v);
        if bn != b * n {
            return Err(shape_err("group_mix", self.shape(w), self.shape(v)));
        }
        let vw = self.value(w);
        let vv = self.value(v);
        let mut out = Vec::with_capacity(b * d);
        let mut terms = Vec::with_capacity(n);
        for s in 0..b {
            let wr = vw.row(s);
            for j in 0..d {
                terms.clear();
                terms.extend((0..n).map(|i| wr[i] * vv.at(s * n + i, j)));
                out.push(sorted_sum(&mut terms));
            }
        }
        let ng = self.ng(w) || self.ng(v);
        Ok(self.push(Tensor::matrix(b, d, out), Op::GroupMix(w, v), ng))
    }

    /// Reverse pass from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let out = &self.nodes[output.0].value;
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(g.reshape(shape).expect("gradient size matches"));
            }
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape();
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
        f(slot.data_mut());
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        let gd = g.data();
        let elementwise = |x: Var, f: &dyn Fn(usize) -> T| -> Tensor<T> {
            let parent = &self.nodes[x.0].value;
            Tensor::new(parent.shape().to_vec(), (0..parent.len()).map(f).collect()).expect("shape")
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.acc_with(grads, *a, |ga| T::gemm(m, n, k, gd, false, vb, true, T::one(), ga));
                self.acc_with(grads, *b, |gb| T::gemm(k, m, n, va, true, gd, false, T::one(), gb));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, g.clone());
                let c = g.cols();
                self.acc_with(grads, *bias, |gb| {
                    for row in gd.chunks(c) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.acc(grads, *a, elementwise(*a, &|i| gd[i] * vb[i]));
                self.acc(grads, *b, elementwise(*b, &|i| gd[i] * va[i]));
            }
            Op::MulConst(x, c) => {
                let cd = c.data();
                self.acc(grads, *x, elementwise(*x, &|i| gd[i] * cd[i]));
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.map(|v| v * *s)),
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::Tanh(x) => {
                let yd = y.data();
                self.acc(grads, *x, elementwise(*x, &|i| gd[i] * (T::one() - yd[i] * yd[i])));
            }
            Op::Sigmoid(x) => {
                let yd = y.data();
                self.acc(grads, *x, elementwise(*x, &|i| gd[i] * yd[i] * (T::one() - yd[i])));
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.acc(
                    grads,
                    *x,
                    elementwise(*x, &|i| if xd[i] > T::zero() { gd[i] } else { T::zero() }),
                );
            }
            Op::Exp(x) => {
                let yd = y.data();
                self.acc(grads, *x, elementwise(*x, &|i| gd[i] * yd[i]));
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                self.acc(grads, *x, elementwise(*x, &|i| gd[i] / xd[i]));
            }
            Op::Clamp(x, lo, hi) => {
                let xd = self.value(*x).data();
                self.acc(
                    grads,
                    *x,
                    elementwise(*x, &|i| {
                        if xd[i] < *lo || xd[i] > *hi {
                            T::zero()
                        } else {
                            gd[i]
                        }
                    }),
                );
            }
            Op::Minimum(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let pick_b = |i: usize| vb[i] < va[i];
                self.acc(
                    grads,
                    *a,
                    elementwise(*a, &|i| if pick_b(i) { T::zero() } else { gd[i] }),
                );
                self.acc(
                    grads,
                    *b,
                    elementwise(*b, &|i| if pick_b(i) { gd[i] } else { T::zero() }),
                );
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let yd = y.data();
                let mut out = Vec::with_capacity(yd.len());
                for (yr, gr) in yd.chunks(c).zip(gd.chunks(c)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    out.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), out).expect("shape"));
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                let yd = y.data();
                let mut out = Vec::with_capacity(yd.len());
                for (yr, gr) in yd.chunks(c).zip(gd.chunks(c)) {
                    let total = gr.iter().fold(T::zero(), |a, &q| a + q);
                    out.extend(yr.iter().zip(gr).map(|(&ly, &q)| q - ly.exp() * total));
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), out).expect("shape"));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (y.rows(), y.cols());
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    self.acc_with(grads, p, |gp| {
                        for r in 0..rows {
                            let src = &gd[r * total + offset..r * total + offset + c];
                            for (o, &v) in gp[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = self.dims(p).0 * cols;
                    self.acc_with(grads, p, |gp| {
                        for (o, &v) in gp.iter_mut().zip(&gd[offset..offset + n]) {
                            *o += v;
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceCols(x, start) => {
                let (rows, len) = (y.rows(), y.cols());
                let c = self.dims(*x).1;
                self.acc_with(grads, *x, |gx| {
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * c + start + j] += gd[r * len + j];
                        }
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let c = y.cols();
                self.acc_with(grads, *x, |gx| {
                    for (o, &v) in gx[start * c..].iter_mut().zip(gd) {
                        *o += v;
                    }
                });
            }
            Op::SelectRows(x, idx) => {
                let c = y.cols();
                self.acc_with(grads, *x, |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += gd[k * c + j];
                        }
                    }
                });
            }
            Op::PickCols(x, idx) => {
                let c = self.dims(*x).1;
                self.acc_with(grads, *x, |gx| {
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * c + j] += gd[r];
                    }
                });
            }
            Op::RowSum(x) => {
                let c = self.dims(*x).1;
                self.acc_with(grads, *x, |gx| {
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o += gd[i / c];
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::full(&shape, s));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n = T::lit(self.value(*x).len() as f64);
                self.acc(grads, *x, Tensor::full(&shape, gd[0] / n));
            }
            Op::Mse(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let k = gd[0] * T::lit(2.0) / T::lit(va.len() as f64);
                self.acc(grads, *a, elementwise(*a, &|i| k * (va[i] - vb[i])));
                self.acc(grads, *b, elementwise(*b, &|i| -k * (va[i] - vb[i])));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, g.clone().reshape(shape).expect("reshape back"));
            }
            Op::GroupScores(q, k) => {
                let (b, d) = self.dims(*q);
                let n = y.cols();
                let vq = self.value(*q);
                let vk = self.value(*k);
                self.acc_with(grads, *q, |gq| {
                    for s in 0..b {
                        for i in 0..n {
                            let gs = gd[s * n + i];
                            for (o, &kv) in gq[s * d..(s + 1) * d].iter_mut().zip(vk.row(s * n + i)) {
                                *o += gs * kv;
                            }
                        }
                    }
                });
                self.acc_with(grads, *k, |gk| {
                    for s in 0..b {
                        for i in 0..n {
                            let gs = gd[s * n + i];
                            let row = s * n + i;
                            for (o, &qv) in gk[row * d..(row + 1) * d].iter_mut().zip(vq.row(s)) {
                                *o += gs * qv;
                            }
                        }
                    }
                });
            }
            Op::GroupMix(w, v) => {
                let (b, n) = self.dims(*w);
                let d = y.cols();
                let vw = self.value(*w);
                let vv = self.value(*v);
                self.acc_with(grads, *w, |gw| {
                    for s in 0..b {
                        let gr = &gd[s * d..(s + 1) * d];
                        for i in 0..n {
                            let dot = gr
                                .iter()
                                .zip(vv.row(s * n + i))
                                .fold(T::zero(), |a, (&x, &y)| a + x * y);
                            gw[s * n + i] += dot;
                        }
                    }
                });
                self.acc_with(grads, *v, |gv| {
                    for s in 0..b {
                        let gr = &gd[s * d..(s + 1) * d];
                        for i in 0..n {
                            let wi = vw.at(s, i);
                            let row = s * n + i;
                            for (o, &gg) in gv[row * d..(row + 1) * d].iter_mut().zip(gr) {
                                *o += wi * gg;
                            }
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::<f32>::new();
        let x = t.input(Tensor::from_f64(1, 2, &[0.0, 0.0]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero_with_zero_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.input_with_grad(Tensor::from_f64(2, 2, &[1.0, -2.0, 0.5, 3.0]));
        let y = t.input_with_grad(Tensor::from_f64(2, 2, &[1.0, -2.0, 0.5, 3.0]));
        let l = t.mse(x, y).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let g = t.backward(l);
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::<f32>::new();
        let a = t.input(Tensor::zeros(&[2, 3]));
        let b = t.input(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn gradients_accumulate_over_shared_use() {
        let mut t = Tape::<f64>::new();
        let x = t.input_with_grad(Tensor::from_f64(1, 1, &[2.0]));
        let y = t.add(x, x).unwrap();
        let z = t.mul(y, x).unwrap(); // 2x²
        let g = t.backward(z);
        assert_eq!(g.get(x).unwrap().item(), 8.0);
    }

    #[test]
    fn inputs_without_grad_receive_none() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::from_f64(1, 1, &[2.0]));
        let y = t.tanh(x);
        let g = t.backward(y);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn group_mix_is_row_permutation_exact() {
        let w = [0.1f32, 0.7, 0.2];
        let v = [1.3f32, -0.2, 7.1, 0.03, -2.2, 1e-3];
        let run = |perm: [usize; 3]| {
            let mut t = Tape::<f32>::new();
            let wv: Vec<f32> = perm.iter().map(|&i| w[i]).collect();
            let vv: Vec<f32> = perm.iter().flat_map(|&i| [v[2 * i], v[2 * i + 1]]).collect();
            let wi = t.input(Tensor::matrix(1, 3, wv));
            let vi = t.input(Tensor::matrix(3, 2, vv));
            let o = t.group_mix(wi, vi).unwrap();
            t.value(o).data().to_vec()
        };
        let base = run([0, 1, 2]);
        for p in [[2, 1, 0], [1, 0, 2], [0, 2, 1]] {
            assert_eq!(base, run(p));
        }
    }
}
