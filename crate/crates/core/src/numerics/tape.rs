//! Reverse-mode differentiation over an explicit tape of primitives.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward pass. `backward` walks the nodes in exact reverse order
//! of recording. Quantizers plug in through [`CustomOp`], which lets them
//! supply surrogate gradients without the tape knowing about them.

use std::fmt;

use crate::error::{Error, Result};

use super::ops::{self, LayerNormCache};
use super::{Matrix, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive defined outside the tape.
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient, and returns one gradient per input (same shapes).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Matrix>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        grad: Matrix,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Dropout {
        x: Var,
        mask: Matrix,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum(_) => "sum",
            Op::Dropout { .. } => "dropout",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of each parameter leaf that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.params() {
            store.accumulate(id, g)?;
        }
        Ok(())
    }

    /// Node indices in the order backward visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    /// A constant: receives no gradient consumer.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Records a parameter; its gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds a `1 × cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::dim("add_row", av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = ops::softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    /// `gamma` and `beta` are `1 × cols` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) = ops::layer_norm(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, cache }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = ops::gelu(self.value(a));
        self.push(out, Op::Gelu(a))
    }

    /// Mean cross-entropy as a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: Option<usize>) -> Result<Var> {
        let (loss, grad) = ops::cross_entropy(self.value(logits), targets, ignore_index)?;
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropy { logits, grad }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_cols(&mats)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(ids)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Mean of all entries as a `1 × 1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/keep).
    pub fn dropout(&mut self, x: Var, mask: Matrix) -> Result<Var> {
        let out = self.value(x).hadamard(&mask)?;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Records an externally computed forward value with a custom backward.
    pub fn custom(&mut self, inputs: &[Var], value: Matrix, op: Box<dyn CustomOp>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// First node (in recording order) holding a non-finite value, described
    /// by op name and index; parameters are reported by name.
    pub fn first_non_finite(&self, store: Option<&ParamStore>) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.is_finite() {
                return None;
            }
            Some(match (&n.op, store) {
                (Op::Param(id), Some(s)) => s.get(*id).name.clone(),
                (op, _) => format!("{}#{}", op.name(), i),
            })
        })
    }

    /// Backward pass from a `1 × 1` node seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::dim("backward seed", shape, (1, 1)));
        }
        self.backward_with(loss, Matrix::scalar(1.0))
    }

    /// Backward pass from an arbitrary node with an explicit seed gradient.
    pub fn backward_with(&self, root: Var, seed: Matrix) -> Result<Gradients> {
        self.value(root).same_shape(&seed, "backward seed")?;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut visited = Vec::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            visited.push(idx);
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                // Leaf gradients are what callers read back.
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, d: Matrix| -> Result<()> {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => {
                        *slot = Some(d);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    acc(*a, ops::matmul_bt(&g, self.value(*b))?)?;
                    acc(*b, ops::matmul_at(self.value(*a), &g)?)?;
                }
                Op::MatMulBt(a, b) => {
                    // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                    acc(*a, ops::matmul(&g, self.value(*b))?)?;
                    acc(*b, ops::matmul_at(&g, self.value(*a))?)?;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0))?;
                    acc(*a, g)?;
                }
                Op::Mul(a, b) => {
                    acc(*a, g.hadamard(self.value(*b))?)?;
                    acc(*b, g.hadamard(self.value(*a))?)?;
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s))?,
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, v) in dr.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    acc(*row, dr)?;
                    acc(*a, g)?;
                }
                Op::Softmax(a) => acc(*a, ops::softmax_rows_backward(&node.value, &g))?,
                Op::LayerNorm { x, gamma, beta, cache } => {
                    let (dx, dg, db) = ops::layer_norm_backward(cache, self.value(*gamma).data(), &g);
                    acc(*x, dx)?;
                    acc(*gamma, Matrix::from_vec(1, dg.len(), dg)?)?;
                    acc(*beta, Matrix::from_vec(1, db.len(), db)?)?;
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let d = x.zip_map(&g, "gelu backward", |xv, gv| ops::gelu_grad_scalar(xv) * gv)?;
                    acc(*a, d)?;
                }
                Op::CrossEntropy { logits, grad } => acc(*logits, grad.scale(g[(0, 0)]))?,
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(*x, d)?;
                }
                Op::SliceRows { x, start } => {
                    let src = self.value(*x);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        d.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    acc(*x, d)?;
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        acc(p, g.slice_cols(off, w)?)?;
                        off += w;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let t = self.value(*table);
                    let mut d = Matrix::zeros(t.rows(), t.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (dv, gv) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                            *dv += gv;
                        }
                    }
                    acc(*table, d)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Matrix::filled(r, c, g[(0, 0)]))?;
                }
                Op::Dropout { x, mask } => acc(*x, g.hadamard(mask)?)?,
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Matrix> = inputs.iter().map(|&v| self.value(v)).collect();
                    let ds = op.backward(&ins, &node.value, &g);
                    debug_assert_eq!(ds.len(), inputs.len(), "{} returned wrong arity", op.name());
                    for (&v, d) in inputs.iter().zip(ds) {
                        acc(v, d)?;
                    }
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            visited,
        })
    }
}
