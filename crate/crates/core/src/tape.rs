//! Reverse-mode automatic differentiation over dense 1-D/2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order. [`Var`] is a cheap handle into the tape. Calling
//! [`Tape::backward`] on a scalar loss replays the record in exact
//! reverse order, accumulating gradients; [`Tape::accumulate_grads`]
//! then adds the gradients of bound parameters into their [`Tensor`]
//! buffers, so repeated backward passes sum as expected.
//!
//! A tape is single-threaded by construction (`RefCell` inside);
//! independent tapes may run on independent threads.

use std::cell::RefCell;

use crate::params::{ParamId, ParamSet};
use crate::tensor::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Pooling flavor for [`Var::pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    SoftmaxRows { a: usize },
    /// Row softmax over the first `valid` columns; masked columns get
    /// exactly zero weight.
    SoftmaxRowsMasked { a: usize, valid: usize },
    /// Column-wise max over the first `valid` rows; `argmax[c]` caches
    /// the winning row per column (lowest index on ties).
    PoolMax { a: usize, argmax: Vec<usize> },
    PoolMean { a: usize, valid: usize },
    LayerNorm {
        a: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows { a: usize, ids: Vec<usize> },
    AddRowBroadcast { a: usize, bias: usize },
    Sum { a: usize },
    LogSumExp { a: usize, softmax: Vec<f64> },
    Pick { a: usize, index: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bindings: RefCell<Vec<(usize, ParamId)>>,
}

/// Handle to one value on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("idx", &self.idx)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let grad = vec![0.0; data.len()];
        nodes.push(Node {
            shape,
            data,
            grad,
            op,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Copies a tensor's current values onto the tape as a constant leaf.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn vector(&self, data: &[f64]) -> Var<'_> {
        self.push(vec![data.len()], data.to_vec(), Op::Leaf)
    }

    pub fn matrix(&self, rows: usize, cols: usize, data: &[f64]) -> Result<Var<'_>> {
        if rows * cols != data.len() {
            return Err(TensorError::BadShape {
                op: "Tape::matrix",
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(self.push(vec![rows, cols], data.to_vec(), Op::Leaf))
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Var<'_> {
        let numel = shape.iter().product();
        self.push(shape, vec![0.0; numel], Op::Leaf)
    }

    /// Brings a parameter onto the tape, remembering the binding so
    /// [`Tape::accumulate_grads`] can route its gradient back.
    pub fn param(&self, ps: &ParamSet, id: ParamId) -> Var<'_> {
        let v = self.constant(ps.get(id));
        self.bindings.borrow_mut().push((v.idx, id));
        v
    }

    /// Concatenates along `axis`. Rank-1 inputs concatenate end to end
    /// (`axis` 0); rank-2 inputs stack rows (`axis` 0) or widen columns
    /// (`axis` 1). Non-concat dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no parts given".into(),
            });
        }
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].idx];
            let rank = first.shape.len();
            if axis >= rank {
                return Err(TensorError::Invalid {
                    op: "concat",
                    msg: format!("axis {axis} out of range for rank {rank}"),
                });
            }
            for p in parts {
                let n = &nodes[p.idx];
                if n.shape.len() != rank {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape.clone(),
                        rhs: n.shape.clone(),
                    });
                }
                for d in 0..rank {
                    if d != axis && n.shape[d] != first.shape[d] {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            lhs: first.shape.clone(),
                            rhs: n.shape.clone(),
                        });
                    }
                }
            }
            let total: usize = parts.iter().map(|p| nodes[p.idx].shape[axis]).sum();
            let mut shape = first.shape.clone();
            shape[axis] = total;
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0; numel];
            if rank == 1 || axis == 0 {
                // contiguous chunks in order
                let mut off = 0;
                for p in parts {
                    let n = &nodes[p.idx];
                    data[off..off + n.data.len()].copy_from_slice(&n.data);
                    off += n.data.len();
                }
            } else {
                // axis == 1, rank == 2: per-row segments
                let rows = shape[0];
                let out_cols = shape[1];
                for r in 0..rows {
                    let mut col = 0;
                    for p in parts {
                        let n = &nodes[p.idx];
                        let c = n.shape[1];
                        data[r * out_cols + col..r * out_cols + col + c]
                            .copy_from_slice(&n.data[r * c..(r + 1) * c]);
                        col += c;
                    }
                }
            }
            (shape, data)
        };
        Ok(self.push(
            shape,
            data,
            Op::Concat {
                parts: parts.iter().map(|p| p.idx).collect(),
                axis,
            },
        ))
    }

    /// Runs the chain rule backwards from a scalar loss. Gradients of
    /// tape nodes are reset first, so each call computes a fresh pass;
    /// accumulation across passes happens in the parameter buffers via
    /// [`Tape::accumulate_grads`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.idx].data.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: nodes[loss.idx].shape.clone(),
            });
        }
        for n in nodes.iter_mut() {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        nodes[loss.idx].grad[0] = 1.0;

        for i in (0..=loss.idx).rev() {
            // Split the slice so the output node and its inputs can be
            // borrowed simultaneously (inputs always precede outputs).
            let (before, rest) = nodes.split_at_mut(i);
            let node = &mut rest[0];
            backward_step(node, before);
        }
        Ok(())
    }

    /// Adds tape gradients of every bound parameter into its tensor's
    /// gradient buffer.
    pub fn accumulate_grads(&self, ps: &mut ParamSet) {
        let nodes = self.nodes.borrow();
        for &(idx, id) in self.bindings.borrow().iter() {
            ps.accumulate_grad(id, &nodes[idx].grad)
                .expect("binding shape matches parameter");
        }
    }
}

/// Propagates the gradient of `node` to its inputs (all at indices `< i`,
/// living in `before`).
fn backward_step(node: &mut Node, before: &mut [Node]) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            for (ga, gi) in before[*a].grad.iter_mut().zip(g) {
                *ga += gi;
            }
            for (gb, gi) in before[*b].grad.iter_mut().zip(g) {
                *gb += gi;
            }
        }
        Op::Sub { a, b } => {
            for (ga, gi) in before[*a].grad.iter_mut().zip(g) {
                *ga += gi;
            }
            for (gb, gi) in before[*b].grad.iter_mut().zip(g) {
                *gb -= gi;
            }
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            for k in 0..g.len() {
                let (av, bv) = (before[a].data[k], before[b].data[k]);
                before[a].grad[k] += g[k] * bv;
                before[b].grad[k] += g[k] * av;
            }
        }
        Op::Scale { a, c } => {
            for (ga, gi) in before[*a].grad.iter_mut().zip(g) {
                *ga += c * gi;
            }
        }
        Op::Relu { a } => {
            let a = *a;
            for k in 0..g.len() {
                if before[a].data[k] > 0.0 {
                    before[a].grad[k] += g[k];
                }
            }
        }
        Op::Sigmoid { a } => {
            let a = *a;
            for k in 0..g.len() {
                let s = node.data[k];
                before[a].grad[k] += g[k] * s * (1.0 - s);
            }
        }
        Op::Tanh { a } => {
            let a = *a;
            for k in 0..g.len() {
                let t = node.data[k];
                before[a].grad[k] += g[k] * (1.0 - t * t);
            }
        }
        Op::MatMul { a, b } => {
            // C = A·B with A m×k, B k×n: dA += G·Bᵀ, dB += Aᵀ·G
            let (ai, bi) = (*a, *b);
            let m = before[ai].shape[0];
            let k = before[ai].shape[1];
            let n = before[bi].shape[1];
            if ai == bi {
                // x·x is legal when m == k == n; dX = G·Xᵀ + Xᵀ·G
                let a_d: Vec<f64> = before[ai].data.clone();
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            before[ai].grad[i * k + p] += gij * a_d[p * n + j];
                            before[ai].grad[p * n + j] += a_d[i * k + p] * gij;
                        }
                    }
                }
            } else {
                let (lo, hi) = (ai.min(bi), ai.max(bi));
                let (left, right) = before.split_at_mut(hi);
                let (na, nb) = if ai < bi {
                    (&mut left[lo], &mut right[0])
                } else {
                    (&mut right[0], &mut left[lo])
                };
                unsafe {
                    // dA(m×k) += G(m×n) · Bᵀ(n×k): B with swapped strides
                    matrixmultiply::dgemm(
                        m,
                        n,
                        k,
                        1.0,
                        g.as_ptr(),
                        n as isize,
                        1,
                        nb.data.as_ptr(),
                        1,
                        n as isize,
                        1.0,
                        na.grad.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                    // dB(k×n) += Aᵀ(k×m) · G(m×n): A with swapped strides
                    matrixmultiply::dgemm(
                        k,
                        m,
                        n,
                        1.0,
                        na.data.as_ptr(),
                        1,
                        k as isize,
                        g.as_ptr(),
                        n as isize,
                        1,
                        1.0,
                        nb.grad.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
        Op::Transpose { a } => {
            let a = *a;
            let rows = node.shape[0];
            let cols = node.shape[1];
            for i in 0..rows {
                for j in 0..cols {
                    before[a].grad[j * rows + i] += g[i * cols + j];
                }
            }
        }
        Op::Concat { parts, axis } => {
            if node.shape.len() == 1 || *axis == 0 {
                let mut off = 0;
                for &p in parts {
                    let len = before[p].data.len();
                    for (gp, gi) in before[p].grad.iter_mut().zip(&g[off..off + len]) {
                        *gp += gi;
                    }
                    off += len;
                }
            } else {
                let rows = node.shape[0];
                let out_cols = node.shape[1];
                for r in 0..rows {
                    let mut col = 0;
                    for &p in parts {
                        let c = before[p].shape[1];
                        for j in 0..c {
                            before[p].grad[r * c + j] += g[r * out_cols + col + j];
                        }
                        col += c;
                    }
                }
            }
        }
        Op::Narrow { a, axis, start } => {
            let a_idx = *a;
            if node.shape.len() == 1 {
                for (k, gi) in g.iter().enumerate() {
                    before[a_idx].grad[start + k] += gi;
                }
            } else if *axis == 0 {
                let cols = node.shape[1];
                for (k, gi) in g.iter().enumerate() {
                    before[a_idx].grad[start * cols + k] += gi;
                }
            } else {
                let rows = node.shape[0];
                let len = node.shape[1];
                let src_cols = before[a_idx].shape[1];
                for r in 0..rows {
                    for j in 0..len {
                        before[a_idx].grad[r * src_cols + start + j] += g[r * len + j];
                    }
                }
            }
        }
        Op::Reshape { a } => {
            for (ga, gi) in before[*a].grad.iter_mut().zip(g) {
                *ga += gi;
            }
        }
        Op::SoftmaxRows { a } => {
            let a = *a;
            let cols = node.shape[1];
            for r in 0..node.shape[0] {
                let row = r * cols;
                let s = &node.data[row..row + cols];
                let gr = &g[row..row + cols];
                let dot: f64 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                for j in 0..cols {
                    before[a].grad[row + j] += s[j] * (gr[j] - dot);
                }
            }
        }
        Op::SoftmaxRowsMasked { a, valid } => {
            let a = *a;
            let cols = node.shape[1];
            for r in 0..node.shape[0] {
                let row = r * cols;
                let s = &node.data[row..row + *valid];
                let gr = &g[row..row + *valid];
                let dot: f64 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                for j in 0..*valid {
                    before[a].grad[row + j] += s[j] * (gr[j] - dot);
                }
            }
        }
        Op::PoolMax { a, argmax } => {
            let a = *a;
            let cols = before[a].shape[1];
            for (c, &r) in argmax.iter().enumerate() {
                before[a].grad[r * cols + c] += g[c];
            }
        }
        Op::PoolMean { a, valid } => {
            let a = *a;
            let cols = before[a].shape[1];
            let w = 1.0 / *valid as f64;
            for r in 0..*valid {
                for c in 0..cols {
                    before[a].grad[r * cols + c] += g[c] * w;
                }
            }
        }
        Op::LayerNorm {
            a,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (a, gamma, beta) = (*a, *gamma, *beta);
            let cols = node.shape[1];
            let nf = cols as f64;
            for r in 0..node.shape[0] {
                let row = r * cols;
                let xh = &xhat[row..row + cols];
                let gr = &g[row..row + cols];
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                let mut dxhat = vec![0.0; cols];
                for j in 0..cols {
                    dxhat[j] = gr[j] * before[gamma].data[j];
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xh[j];
                }
                m1 /= nf;
                m2 /= nf;
                for j in 0..cols {
                    before[a].grad[row + j] += inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
                    before[gamma].grad[j] += gr[j] * xh[j];
                    before[beta].grad[j] += gr[j];
                }
            }
        }
        Op::GatherRows { a, ids } => {
            let a = *a;
            let cols = node.shape[1];
            for (out_r, &src_r) in ids.iter().enumerate() {
                for c in 0..cols {
                    before[a].grad[src_r * cols + c] += g[out_r * cols + c];
                }
            }
        }
        Op::AddRowBroadcast { a, bias } => {
            let (a, bias) = (*a, *bias);
            let cols = node.shape[1];
            for r in 0..node.shape[0] {
                for c in 0..cols {
                    let gi = g[r * cols + c];
                    before[a].grad[r * cols + c] += gi;
                    before[bias].grad[c] += gi;
                }
            }
        }
        Op::Sum { a } => {
            for ga in before[*a].grad.iter_mut() {
                *ga += g[0];
            }
        }
        Op::LogSumExp { a, softmax } => {
            let a = *a;
            for (k, s) in softmax.iter().enumerate() {
                before[a].grad[k] += g[0] * s;
            }
        }
        Op::Pick { a, index } => {
            before[*a].grad[*index] += g[0];
        }
    }
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].shape.clone()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.idx].data.clone()
    }

    /// Value of a single-element var.
    pub fn value(&self) -> Result<f64> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.idx];
        if n.data.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "value",
                shape: n.shape.clone(),
            });
        }
        Ok(n.data[0])
    }

    /// Gradient accumulated on this node by the last backward pass.
    pub fn grad(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.idx].grad.clone()
    }

    fn with<R>(&self, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.idx])
    }

    fn same_shape(&self, other: Var<'t>, op: &'static str) -> Result<()> {
        let nodes = self.tape.nodes.borrow();
        let (l, r) = (&nodes[self.idx].shape, &nodes[other.idx].shape);
        if l != r {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: l.clone(),
                rhs: r.clone(),
            });
        }
        Ok(())
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let (shape, data) = self.with(|a| {
            other.with(|b| {
                (
                    a.shape.clone(),
                    a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                )
            })
        });
        Ok(self.tape.push(
            shape,
            data,
            Op::Add {
                a: self.idx,
                b: other.idx,
            },
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let (shape, data) = self.with(|a| {
            other.with(|b| {
                (
                    a.shape.clone(),
                    a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
                )
            })
        });
        Ok(self.tape.push(
            shape,
            data,
            Op::Sub {
                a: self.idx,
                b: other.idx,
            },
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "hadamard")?;
        let (shape, data) = self.with(|a| {
            other.with(|b| {
                (
                    a.shape.clone(),
                    a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
                )
            })
        });
        Ok(self.tape.push(
            shape,
            data,
            Op::Mul {
                a: self.idx,
                b: other.idx,
            },
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let (shape, data) =
            self.with(|a| (a.shape.clone(), a.data.iter().map(|x| x * c).collect()));
        self.tape.push(shape, data, Op::Scale { a: self.idx, c })
    }

    /// ReLU with gradient 0 at exactly 0.
    pub fn relu(self) -> Var<'t> {
        let (shape, data) = self.with(|a| {
            (
                a.shape.clone(),
                a.data.iter().map(|x| x.max(0.0)).collect(),
            )
        });
        self.tape.push(shape, data, Op::Relu { a: self.idx })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let (shape, data) = self.with(|a| {
            (
                a.shape.clone(),
                a.data
                    .iter()
                    .map(|x| {
                        // split on sign so exp never overflows
                        if *x >= 0.0 {
                            1.0 / (1.0 + (-x).exp())
                        } else {
                            let e = x.exp();
                            e / (1.0 + e)
                        }
                    })
                    .collect(),
            )
        });
        self.tape.push(shape, data, Op::Sigmoid { a: self.idx })
    }

    pub fn tanh(self) -> Var<'t> {
        let (shape, data) = self.with(|a| {
            (
                a.shape.clone(),
                a.data.iter().map(|x| x.tanh()).collect(),
            )
        });
        self.tape.push(shape, data, Op::Tanh { a: self.idx })
    }

    /// Matrix product of rank-2 vars with matching inner dimension.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, n, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            let b = &nodes[other.idx];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut data = vec![0.0; m * n];
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a.data.as_ptr(),
                    k as isize,
                    1,
                    b.data.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    data.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            (m, n, data)
        };
        Ok(self.tape.push(
            vec![m, n],
            data,
            Op::MatMul {
                a: self.idx,
                b: other.idx,
            },
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (rows, cols, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            if a.shape.len() != 2 {
                return Err(TensorError::Invalid {
                    op: "transpose",
                    msg: format!("expected rank 2, got {:?}", a.shape),
                });
            }
            let (r, c) = (a.shape[0], a.shape[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data[i * c + j];
                }
            }
            (c, r, data)
        };
        Ok(self
            .tape
            .push(vec![rows, cols], data, Op::Transpose { a: self.idx }))
    }

    /// Contiguous slice along `axis` (0 for rank-1; 0 = rows or 1 =
    /// columns for rank-2).
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            let rank = a.shape.len();
            if axis >= rank {
                return Err(TensorError::Invalid {
                    op: "narrow",
                    msg: format!("axis {axis} out of range for rank {rank}"),
                });
            }
            if start + len > a.shape[axis] || len == 0 {
                return Err(TensorError::IndexOutOfRange {
                    op: "narrow",
                    index: start + len,
                    len: a.shape[axis],
                });
            }
            if rank == 1 {
                (vec![len], a.data[start..start + len].to_vec())
            } else if axis == 0 {
                let cols = a.shape[1];
                (
                    vec![len, cols],
                    a.data[start * cols..(start + len) * cols].to_vec(),
                )
            } else {
                let rows = a.shape[0];
                let cols = a.shape[1];
                let mut data = vec![0.0; rows * len];
                for r in 0..rows {
                    data[r * len..(r + 1) * len]
                        .copy_from_slice(&a.data[r * cols + start..r * cols + start + len]);
                }
                (vec![rows, len], data)
            }
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::Narrow {
                a: self.idx,
                axis,
                start,
            },
        ))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            let numel: usize = shape.iter().product();
            if numel != a.data.len() || shape.is_empty() || shape.len() > 2 {
                return Err(TensorError::BadShape {
                    op: "reshape",
                    shape,
                    len: a.data.len(),
                });
            }
            a.data.clone()
        };
        Ok(self.tape.push(shape, data, Op::Reshape { a: self.idx }))
    }

    /// Row `i` of a rank-2 var, as a rank-1 var.
    pub fn row(self, i: usize) -> Result<Var<'t>> {
        let cols = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            if a.shape.len() != 2 {
                return Err(TensorError::Invalid {
                    op: "row",
                    msg: format!("expected rank 2, got {:?}", a.shape),
                });
            }
            a.shape[1]
        };
        self.narrow(0, i, 1)?.reshape(vec![cols])
    }

    /// Numerically stable row-wise softmax (max subtraction per row).
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            if a.shape.len() != 2 {
                return Err(TensorError::Invalid {
                    op: "softmax_rows",
                    msg: format!("expected rank 2, got {:?}", a.shape),
                });
            }
            let cols = a.shape[1];
            let mut data = vec![0.0; a.data.len()];
            for r in 0..a.shape[0] {
                let row = &a.data[r * cols..(r + 1) * cols];
                softmax_into(row, &mut data[r * cols..(r + 1) * cols]);
            }
            (a.shape.clone(), data)
        };
        Ok(self
            .tape
            .push(shape, data, Op::SoftmaxRows { a: self.idx }))
    }

    /// Row-wise softmax over the first `valid` columns; the remaining
    /// columns receive exactly zero weight (treated as -inf logits).
    pub fn softmax_rows_masked(self, valid: usize) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            if a.shape.len() != 2 {
                return Err(TensorError::Invalid {
                    op: "softmax_rows_masked",
                    msg: format!("expected rank 2, got {:?}", a.shape),
                });
            }
            let cols = a.shape[1];
            if valid == 0 {
                return Err(TensorError::EmptySequence {
                    op: "softmax_rows_masked",
                });
            }
            if valid > cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax_rows_masked",
                    index: valid,
                    len: cols,
                });
            }
            let mut data = vec![0.0; a.data.len()];
            for r in 0..a.shape[0] {
                let row = &a.data[r * cols..r * cols + valid];
                softmax_into(row, &mut data[r * cols..r * cols + valid]);
            }
            (a.shape.clone(), data)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::SoftmaxRowsMasked {
                a: self.idx,
                valid,
            },
        ))
    }

    /// Column-wise pooling over the first `valid` rows of a rank-2 var.
    /// Padding rows are never read. Max ties break to the lowest row
    /// index so gradients are deterministic.
    pub fn pool(self, kind: PoolKind, valid: usize) -> Result<Var<'t>> {
        let (cols, out, argmax) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            if a.shape.len() != 2 {
                return Err(TensorError::Invalid {
                    op: "pool",
                    msg: format!("expected rank 2, got {:?}", a.shape),
                });
            }
            if valid == 0 {
                return Err(TensorError::EmptySequence { op: "pool" });
            }
            if valid > a.shape[0] {
                return Err(TensorError::IndexOutOfRange {
                    op: "pool",
                    index: valid,
                    len: a.shape[0],
                });
            }
            let cols = a.shape[1];
            let mut out = vec![0.0; cols];
            let mut argmax = vec![0usize; cols];
            match kind {
                PoolKind::Max => {
                    for c in 0..cols {
                        let mut best = a.data[c];
                        let mut best_r = 0;
                        for r in 1..valid {
                            let v = a.data[r * cols + c];
                            if v > best {
                                best = v;
                                best_r = r;
                            }
                        }
                        out[c] = best;
                        argmax[c] = best_r;
                    }
                }
                PoolKind::Mean => {
                    for r in 0..valid {
                        for c in 0..cols {
                            out[c] += a.data[r * cols + c];
                        }
                    }
                    let w = 1.0 / valid as f64;
                    out.iter_mut().for_each(|v| *v *= w);
                }
            }
            (cols, out, argmax)
        };
        let op = match kind {
            PoolKind::Max => Op::PoolMax {
                a: self.idx,
                argmax,
            },
            PoolKind::Mean => Op::PoolMean {
                a: self.idx,
                valid,
            },
        };
        Ok(self.tape.push(vec![cols], out, op))
    }

    /// Row-wise layer normalization with learned gain/offset vectors.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (shape, data, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            let gm = &nodes[gamma.idx];
            let bt = &nodes[beta.idx];
            if a.shape.len() != 2 {
                return Err(TensorError::Invalid {
                    op: "layer_norm",
                    msg: format!("expected rank 2, got {:?}", a.shape),
                });
            }
            let cols = a.shape[1];
            if gm.shape != vec![cols] || bt.shape != vec![cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: a.shape.clone(),
                    rhs: gm.shape.clone(),
                });
            }
            let rows = a.shape[0];
            let mut data = vec![0.0; a.data.len()];
            let mut xhat = vec![0.0; a.data.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &a.data[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..cols {
                    let xh = (row[j] - mean) * is;
                    xhat[r * cols + j] = xh;
                    data[r * cols + j] = gm.data[j] * xh + bt.data[j];
                }
            }
            (a.shape.clone(), data, xhat, inv_std)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::LayerNorm {
                a: self.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of a rank-2 var by index (embedding lookup).
    /// Gradients scatter-add back, so repeated indices accumulate.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let (cols, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            if a.shape.len() != 2 {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("expected rank 2, got {:?}", a.shape),
                });
            }
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let mut data = vec![0.0; ids.len() * cols];
            for (out_r, &src_r) in ids.iter().enumerate() {
                if src_r >= rows {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_rows",
                        index: src_r,
                        len: rows,
                    });
                }
                data[out_r * cols..(out_r + 1) * cols]
                    .copy_from_slice(&a.data[src_r * cols..(src_r + 1) * cols]);
            }
            (cols, data)
        };
        Ok(self.tape.push(
            vec![ids.len(), cols],
            data,
            Op::GatherRows {
                a: self.idx,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Adds a rank-1 bias to every row of a rank-2 var.
    pub fn add_row_broadcast(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            let b = &nodes[bias.idx];
            if a.shape.len() != 2 || b.shape.len() != 1 || b.shape[0] != a.shape[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row_broadcast",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let cols = a.shape[1];
            let mut data = a.data.clone();
            for r in 0..a.shape[0] {
                for c in 0..cols {
                    data[r * cols + c] += b.data[c];
                }
            }
            (a.shape.clone(), data)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::AddRowBroadcast {
                a: self.idx,
                bias: bias.idx,
            },
        ))
    }

    /// Sum of all elements, as a scalar var.
    pub fn sum(self) -> Var<'t> {
        let total = self.with(|a| a.data.iter().sum::<f64>());
        self.tape
            .push(vec![1], vec![total], Op::Sum { a: self.idx })
    }

    /// Stable log-sum-exp of a rank-1 var, as a scalar var.
    pub fn logsumexp(self) -> Result<Var<'t>> {
        let (value, softmax) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            if a.shape.len() != 1 || a.data.is_empty() {
                return Err(TensorError::Invalid {
                    op: "logsumexp",
                    msg: format!("expected non-empty rank 1, got {:?}", a.shape),
                });
            }
            let max = a.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = a.data.iter().map(|x| (x - max).exp()).sum();
            let value = max + sum.ln();
            let softmax = a.data.iter().map(|x| (x - max).exp() / sum).collect();
            (value, softmax)
        };
        Ok(self.tape.push(
            vec![1],
            vec![value],
            Op::LogSumExp {
                a: self.idx,
                softmax,
            },
        ))
    }

    /// Single element of a rank-1 var, as a scalar var.
    pub fn pick(self, index: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx];
            if a.shape.len() != 1 {
                return Err(TensorError::Invalid {
                    op: "pick",
                    msg: format!("expected rank 1, got {:?}", a.shape),
                });
            }
            if index >= a.data.len() {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index,
                    len: a.data.len(),
                });
            }
            a.data[index]
        };
        Ok(self.tape.push(
            vec![1],
            vec![value],
            Op::Pick {
                a: self.idx,
                index,
            },
        ))
    }

    /// Dot product of two rank-1 vars, as a scalar var.
    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        Ok(self.hadamard(other)?.sum())
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
