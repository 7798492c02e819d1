//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! execution order, so node ids are already a topological order. Calling
//! [`Tape::backward`] walks the nodes in reverse, accumulating adjoints into
//! each input. A node read by several consumers receives the sum of their
//! contributions.
//!
//! ```
//! use piann_core::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
//! let loss = x.frobenius_sq();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0]);
//! ```
//!
//! Broadcasting is limited to pairing a one-element tensor with a tensor of
//! any shape. Every other binary operation requires identical shapes.

use std::cell::{Cell, Ref, RefCell};
use std::ops::Range;

use crate::error::TensorError;
use crate::tensor::{matmul_a_bt_acc, matmul_at_b_acc, matmul_kernel, Tensor};

type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Id, b: Id, m: usize, k: usize, n: usize },
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Affine { a: Id, scale: f64 },
    Sigmoid(Id),
    Tanh(Id),
    Square(Id),
    SoftmaxRows { a: Id, cols: usize },
    Concat { parts: Vec<Id>, extents: Vec<usize>, outer: usize, inner: usize },
    Slice { a: Id, outer: usize, extent: usize, inner: usize, start: usize, end: usize },
    Reshape(Id),
    Transpose { a: Id, rows: usize, cols: usize },
    Sum(Id),
    Mean(Id),
    FrobeniusSq(Id),
    AdditiveScores { keys: Id, query: Id, v: Id, hidden: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

/// Recording of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node so the tape can record a fresh pass.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    /// A trainable input. It always receives a gradient from `backward`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-trainable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, var: Var<'_>) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[var.id].value)
    }

    fn push(&self, value: Tensor, op: Op, trainable: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            trainable,
        });
        Var { tape: self, id }
    }

    fn check_owner(&self, var: Var<'_>) -> Result<(), TensorError> {
        if std::ptr::eq(var.tape, self) {
            Ok(())
        } else {
            Err(TensorError::Detached)
        }
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        self.check_owner(loss)?;
        let shape = loss.shape();
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar { shape });
        }
        self.backward_seeded(&[(loss, Tensor::new(shape, vec![1.0])?)])
    }

    /// Reverse pass starting from explicit output adjoints, i.e. a
    /// vector-Jacobian product. Seeds for the same variable are summed.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, Tensor)]) -> Result<Gradients, TensorError> {
        if self.consumed.get() {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut top = 0;
        for (var, seed) in seeds {
            self.check_owner(*var)?;
            let value = &nodes[var.id].value;
            if value.shape() != seed.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "backward seed",
                    left: value.shape().to_vec(),
                    right: seed.shape().to_vec(),
                });
            }
            accumulate(&mut grads, var.id, seed.data());
            top = top.max(var.id + 1);
        }
        self.consumed.set(true);

        for id in (0..top).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, &mut grads, &node.op, &node.value, &g);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let out = nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                if !node.trainable {
                    return None;
                }
                let data = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

/// Adjoints of the trainable leaves of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a trainable leaf. Panics for non-leaf variables.
    pub fn wrt(&self, var: Var<'_>) -> &Tensor {
        self.get(var).expect("gradient requested for a non-trainable variable")
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: Id, g: &[f64]) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_with(grads: &mut [Option<Vec<f64>>], id: Id, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Adjoint of a binary elementwise operand; `d` gives the local partial at
/// output index `i`. A broadcast scalar operand receives the sum.
fn accumulate_binary(
    grads: &mut [Option<Vec<f64>>],
    id: Id,
    operand_len: usize,
    g: &[f64],
    d: impl Fn(usize) -> f64,
) {
    accumulate_with(grads, id, operand_len, |acc| {
        if operand_len == g.len() {
            for (i, (a, gi)) in acc.iter_mut().zip(g).enumerate() {
                *a += gi * d(i);
            }
        } else {
            acc[0] += g.iter().enumerate().map(|(i, gi)| gi * d(i)).sum::<f64>();
        }
    });
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], op: &Op, out: &Tensor, g: &[f64]) {
    let val = |id: Id| nodes[id].value.data();
    let len = |id: Id| nodes[id].value.len();
    // Index into an operand that may be a broadcast scalar.
    let pick = |data: &[f64], i: usize| if data.len() == 1 { data[0] } else { data[i] };
    match *op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (val(a), val(b));
            accumulate_with(grads, a, m * k, |acc| matmul_a_bt_acc(acc, g, bv, m, k, n));
            accumulate_with(grads, b, k * n, |acc| matmul_at_b_acc(acc, av, g, m, k, n));
        }
        Op::Add(a, b) => {
            accumulate_binary(grads, a, len(a), g, |_| 1.0);
            accumulate_binary(grads, b, len(b), g, |_| 1.0);
        }
        Op::Sub(a, b) => {
            accumulate_binary(grads, a, len(a), g, |_| 1.0);
            accumulate_binary(grads, b, len(b), g, |_| -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            accumulate_binary(grads, a, av.len(), g, |i| pick(bv, i));
            accumulate_binary(grads, b, bv.len(), g, |i| pick(av, i));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(a), val(b));
            accumulate_binary(grads, a, av.len(), g, |i| 1.0 / pick(bv, i));
            accumulate_binary(grads, b, bv.len(), g, |i| {
                let d = pick(bv, i);
                -pick(av, i) / (d * d)
            });
        }
        Op::Affine { a, scale } => {
            accumulate_with(grads, a, g.len(), |acc| {
                acc.iter_mut().zip(g).for_each(|(x, gi)| *x += scale * gi)
            });
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            accumulate_with(grads, a, g.len(), |acc| {
                for ((x, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *x += gi * yi * (1.0 - yi);
                }
            });
        }
        Op::Tanh(a) => {
            let y = out.data();
            accumulate_with(grads, a, g.len(), |acc| {
                for ((x, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                    *x += gi * (1.0 - yi * yi);
                }
            });
        }
        Op::Square(a) | Op::FrobeniusSq(a) => {
            let av = val(a);
            let scalar_out = matches!(op, Op::FrobeniusSq(_));
            accumulate_with(grads, a, av.len(), |acc| {
                for (i, (x, ai)) in acc.iter_mut().zip(av).enumerate() {
                    let gi = if scalar_out { g[0] } else { g[i] };
                    *x += 2.0 * ai * gi;
                }
            });
        }
        Op::SoftmaxRows { a, cols } => {
            let y = out.data();
            accumulate_with(grads, a, y.len(), |acc| {
                for ((arow, grow), yrow) in acc
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(y.chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((x, gi), yi) in arow.iter_mut().zip(grow).zip(yrow) {
                        *x += yi * (gi - dot);
                    }
                }
            });
        }
        Op::Concat {
            ref parts,
            ref extents,
            outer,
            inner,
        } => {
            let total: usize = extents.iter().sum();
            let mut offset = 0;
            for (&part, &extent) in parts.iter().zip(extents) {
                let block = extent * inner;
                accumulate_with(grads, part, outer * block, |acc| {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset * inner..][..block];
                        for (x, s) in acc[o * block..(o + 1) * block].iter_mut().zip(src) {
                            *x += s;
                        }
                    }
                });
                offset += extent;
            }
        }
        Op::Slice {
            a,
            outer,
            extent,
            inner,
            start,
            end,
        } => {
            let block = (end - start) * inner;
            accumulate_with(grads, a, outer * extent * inner, |acc| {
                for o in 0..outer {
                    let dst = &mut acc[o * extent * inner + start * inner..][..block];
                    for (x, s) in dst.iter_mut().zip(&g[o * block..(o + 1) * block]) {
                        *x += s;
                    }
                }
            });
        }
        Op::Reshape(a) => accumulate(grads, a, g),
        Op::Transpose { a, rows, cols } => {
            accumulate_with(grads, a, rows * cols, |acc| {
                for r in 0..rows {
                    for c in 0..cols {
                        acc[r * cols + c] += g[c * rows + r];
                    }
                }
            });
        }
        Op::AdditiveScores {
            keys,
            query,
            v,
            ref hidden,
        } => {
            let vv = val(v);
            let width = vv.len();
            let mut g_keys = vec![0.0; hidden.len()];
            let mut g_query = vec![0.0; width];
            let mut g_v = vec![0.0; width];
            for ((gk_row, h_row), &gj) in g_keys.chunks_mut(width).zip(hidden.chunks(width)).zip(g) {
                for k in 0..width {
                    let h = h_row[k];
                    let pre = gj * vv[k] * (1.0 - h * h);
                    gk_row[k] = pre;
                    g_query[k] += pre;
                    g_v[k] += gj * h;
                }
            }
            accumulate(grads, keys, &g_keys);
            accumulate(grads, query, &g_query);
            accumulate(grads, v, &g_v);
        }
        Op::Sum(a) => {
            accumulate_with(grads, a, len(a), |acc| acc.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Mean(a) => {
            let n = len(a) as f64;
            accumulate_with(grads, a, len(a), |acc| {
                acc.iter_mut().for_each(|x| *x += g[0] / n)
            });
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Concatenates `parts` along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, TensorError> {
    let first = parts.first().expect("concat of zero tensors");
    let tape = first.tape;
    let nodes = tape.nodes.borrow();
    let base = nodes[first.id].value.shape().to_vec();
    if axis >= base.len() {
        return Err(TensorError::AxisOutOfRange {
            op: "concat",
            axis,
            rank: base.len(),
        });
    }
    let mut extents = Vec::with_capacity(parts.len());
    for p in parts {
        tape.check_owner(*p)?;
        let s = nodes[p.id].value.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                left: base.clone(),
                right: s.to_vec(),
            });
        }
        extents.push(s[axis]);
    }
    let (outer, _, inner) = split_axis(&base, axis);
    let total: usize = extents.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &extent) in parts.iter().zip(&extents) {
            let src = nodes[p.id].value.data();
            data.extend_from_slice(&src[o * extent * inner..(o + 1) * extent * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    drop(nodes);
    let value = Tensor::new(shape, data)?;
    Ok(tape.push(
        value,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            extents,
            outer,
            inner,
        },
        false,
    ))
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.nodes.borrow()[self.id].value);
        self.tape.push(value, op, false)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(other)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        let value = if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        } else if b.len() == 1 {
            let y = b.data()[0];
            a.map(|x| f(x, y))
        } else if a.len() == 1 {
            let x = a.data()[0];
            b.map(|y| f(x, y))
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        };
        drop(nodes);
        Ok(self.tape.push(value, op, false))
    }

    /// Matrix product. A rank-1 left operand acts as a row vector and a
    /// rank-1 right operand as a column vector; the corresponding extent is
    /// dropped from the result.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(other)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        };
        let (m, k) = match a.shape() {
            [k] => (1, *k),
            [m, k] => (*m, *k),
            _ => return Err(mismatch()),
        };
        let (k2, n) = match b.shape() {
            [k] => (*k, 1),
            [k, n] => (*k, *n),
            _ => return Err(mismatch()),
        };
        if k != k2 {
            return Err(mismatch());
        }
        let mut shape = Vec::with_capacity(2);
        if a.rank() == 2 {
            shape.push(m);
        }
        if b.rank() == 2 {
            shape.push(n);
        }
        let data = matmul_kernel(a.data(), b.data(), m, k, n);
        drop(nodes);
        let value = Tensor::new(shape, data)?;
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            false,
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    /// Elementwise quotient; fails if any divisor is exactly zero.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        if self.tape.nodes.borrow()[other.id]
            .value
            .data()
            .contains(&0.0)
        {
            return Err(TensorError::DivisionByZero);
        }
        self.binary(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    /// `scale · self + shift` with constant coefficients.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.unary(Op::Affine { a: self.id, scale }, |t| t.map(|x| scale * x + shift))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.affine(factor, 0.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |t| t.map(sigmoid))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |t| t.map(tanh))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |t| t.map(|x| x * x))
    }

    /// Row-wise softmax of a matrix; a rank-1 input is treated as one row.
    pub fn softmax_rows(self) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let cols = match shape.as_slice() {
            &[n] | &[_, n] => n,
            _ => {
                return Err(TensorError::Rank {
                    op: "softmax_rows",
                    expected: 2,
                    shape,
                })
            }
        };
        Ok(self.unary(Op::SoftmaxRows { a: self.id, cols }, |t| {
            let mut out = t.clone();
            if cols > 0 {
                out.data_mut().chunks_mut(cols).for_each(softmax_in_place);
            }
            out
        }))
    }

    pub fn concat(self, other: Var<'t>, axis: usize) -> Result<Var<'t>, TensorError> {
        concat(&[self, other], axis)
    }

    /// Sub-range `range` along `axis`.
    pub fn slice(self, axis: usize, range: Range<usize>) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let (start, end) = (range.start, range.end);
        if start > end || end > extent {
            return Err(TensorError::SliceOutOfRange { start, end, extent });
        }
        let block = (end - start) * inner;
        let op = Op::Slice {
            a: self.id,
            outer,
            extent,
            inner,
            start,
            end,
        };
        Ok(self.unary(op, |t| {
            let mut data = Vec::with_capacity(outer * block);
            for o in 0..outer {
                data.extend_from_slice(&t.data()[o * extent * inner + start * inner..][..block]);
            }
            let mut s = shape.clone();
            s[axis] = end - start;
            Tensor::new(s, data).expect("slice shape")
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(),
                right: shape.to_vec(),
            });
        }
        Ok(self.unary(Op::Reshape(self.id), |t| {
            t.clone().reshaped(shape.to_vec()).expect("reshape")
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let &[rows, cols] = shape.as_slice() else {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape,
            });
        };
        Ok(self.unary(Op::Transpose { a: self.id, rows, cols }, |t| {
            let src = t.data();
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    data[c * rows + r] = src[r * cols + c];
                }
            }
            Tensor::new(vec![cols, rows], data).expect("transpose")
        }))
    }

    /// Additive alignment scores `s_j = Σ_k v_k tanh(keys[j, k] + query[k])`
    /// for `keys: N × A`, `query: [A]`, `v: [A]`, as one fused node.
    pub fn additive_scores(self, query: Var<'t>, v: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.check_owner(query)?;
        self.tape.check_owner(v)?;
        let nodes = self.tape.nodes.borrow();
        let (k, q, vv) = (&nodes[self.id].value, &nodes[query.id].value, &nodes[v.id].value);
        let width = match k.shape() {
            &[_, w] if q.shape() == [w] && vv.shape() == [w] => w,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "additive_scores",
                    left: k.shape().to_vec(),
                    right: q.shape().to_vec(),
                })
            }
        };
        let (qd, vd) = (q.data(), vv.data());
        let mut hidden = Vec::with_capacity(k.len());
        let mut scores = Vec::with_capacity(k.shape()[0]);
        for row in k.data().chunks(width.max(1)) {
            hidden.extend(row.iter().zip(qd).map(|(kv, qv)| tanh(kv + qv)));
            let h_row = &hidden[hidden.len() - row.len()..];
            scores.push(h_row.iter().zip(vd).map(|(h, w)| h * w).sum());
        }
        drop(nodes);
        Ok(self.tape.push(
            Tensor::vector(scores),
            Op::AdditiveScores {
                keys: self.id,
                query: query.id,
                v: v.id,
                hidden,
            },
            false,
        ))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.data().iter().sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |t| {
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        })
    }

    /// Sum of squared entries (squared Frobenius norm).
    pub fn frobenius_sq(self) -> Var<'t> {
        self.unary(Op::FrobeniusSq(self.id), |t| {
            Tensor::scalar(t.data().iter().map(|x| x * x).sum())
        })
    }
}

/// `e^x` for `x ≤ 0`, branch-free so that loops over it vectorize.
///
/// Range reduction `x = k ln 2 + r`, `|r| ≤ ln 2 / 2`, followed by a
/// degree-13 Taylor polynomial; the relative error is a few ulps.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-708.0);
    // Adding 1.5·2⁵² rounds to the nearest integer without a libm call.
    const ROUND: f64 = 6_755_399_441_055_744.0;
    let k = (x * std::f64::consts::LOG2_E + ROUND) - ROUND;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor coefficients 1/n!, highest degree first.
    const C: [f64; 14] = [
        1.0 / 6_227_020_800.0,
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ];
    let p = C[1..].iter().fold(C[0], |p, &c| p * r + c);
    f64::from_bits(((k as i64 + 1023) as u64) << 52) * p
}

/// Hyperbolic tangent through one reduced exponential, a few times cheaper
/// than `f64::tanh`; the absolute error stays within a few ulps of 1.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let e = exp_nonpositive(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
