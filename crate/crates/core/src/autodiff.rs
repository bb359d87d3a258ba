//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation together with its forward value.
//! [`Tape::backward`] walks the records in reverse and accumulates exact
//! gradients for the leaves marked learnable. A tape is built fresh for
//! each loss evaluation and discarded afterwards.

use std::collections::HashMap;

use crate::error::{contract, Error, Result};
use crate::matrix::Matrix;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Abs,
    Square,
    Hadamard,
    Sub,
    Add,
}

impl Elementwise {
    pub fn arity(self) -> usize {
        match self {
            Elementwise::Relu | Elementwise::Sigmoid | Elementwise::Abs | Elementwise::Square => 1,
            Elementwise::Hadamard | Elementwise::Sub | Elementwise::Add => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    L1,
    FrobSq,
    /// Forward only: no gradient flows through the maximum.
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    MulDiag(NodeId, NodeId),
    Unary(Elementwise, NodeId),
    Binary(Elementwise, NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatRows(NodeId, NodeId),
    Ste(NodeId),
    Reduce(Reduce, NodeId),
    Pick(NodeId, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Transpose(a) | Op::Unary(_, a) | Op::Scale(a, _) | Op::Ste(a) | Op::Reduce(_, a) | Op::Pick(a, _) => {
                vec![*a]
            }
            Op::MatMul(a, b) | Op::MulDiag(a, b) | Op::Binary(_, a, b) | Op::ConcatRows(a, b) => vec![*a, *b],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the learnable leaves.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    by_leaf: HashMap<NodeId, Matrix>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.by_leaf.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.by_leaf.remove(&id)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Ids of the nodes `id` reads from.
    pub fn inputs(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    pub fn is_learnable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            Op::Reduce(Reduce::Max, _) => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Learnable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// `a · diag(s)` for a column vector `s` with one entry per column of `a`.
    pub fn mul_diag(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.cols() != 1 || sv.rows() != av.cols() {
            return Err(Error::Dimension { op: "mul_diag", left: av.shape(), right: sv.shape() });
        }
        let mut out = av.clone();
        let cols = av.cols();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                for (x, &w) in row.iter_mut().zip(sv.data()) {
                    *x *= w;
                }
            }
        }
        Ok(self.push(Op::MulDiag(a, s), out))
    }

    /// Elementwise operation; unary kinds take one input, binary kinds two.
    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != kind.arity() {
            return Err(contract(format!("{kind:?} takes {} inputs, got {}", kind.arity(), inputs.len())));
        }
        match kind {
            Elementwise::Relu | Elementwise::Sigmoid | Elementwise::Abs | Elementwise::Square => {
                let x = self.value(inputs[0]);
                let v = match kind {
                    Elementwise::Relu => x.map(|v| v.max(0.0)),
                    Elementwise::Sigmoid => x.map(sigmoid),
                    Elementwise::Abs => x.map(f64::abs),
                    _ => x.map(|v| v * v),
                };
                Ok(self.push(Op::Unary(kind, inputs[0]), v))
            }
            Elementwise::Hadamard | Elementwise::Sub | Elementwise::Add => {
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let v = match kind {
                    Elementwise::Hadamard => a.zip_with(b, "hadamard", |x, y| x * y)?,
                    Elementwise::Sub => a.zip_with(b, "sub", |x, y| x - y)?,
                    _ => a.zip_with(b, "add", |x, y| x + y)?,
                };
                Ok(self.push(Op::Binary(kind, inputs[0], inputs[1]), v))
            }
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.elementwise(Elementwise::Relu, &[x]).expect("unary arity")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.elementwise(Elementwise::Sigmoid, &[x]).expect("unary arity")
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.elementwise(Elementwise::Abs, &[x]).expect("unary arity")
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.elementwise(Elementwise::Square, &[x]).expect("unary arity")
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Elementwise::Hadamard, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Elementwise::Sub, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(Elementwise::Add, &[a, b])
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        // An empty block stacks with anything of the same column count, and a
        // 0x0 block is treated as an empty vector.
        let a_empty = av.is_empty() && (av.cols() == bv.cols() || av.cols() == 0);
        let b_empty = bv.is_empty() && (av.cols() == bv.cols() || bv.cols() == 0);
        if av.cols() != bv.cols() && !(a_empty || b_empty) {
            return Err(Error::Dimension { op: "concat_rows", left: av.shape(), right: bv.shape() });
        }
        let cols = if a_empty { bv.cols() } else { av.cols() };
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let rows = if cols == 0 { 0 } else { data.len() / cols };
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(a, b), v))
    }

    /// Hard indicator `1[m > 0]` forward, identity Jacobian backward.
    pub fn ste_binarize(&mut self, m: NodeId) -> NodeId {
        let v = self.value(m).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(Op::Ste(m), v)
    }

    pub fn reduce(&mut self, kind: Reduce, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = match kind {
            Reduce::Sum => xv.sum(),
            Reduce::L1 => xv.data().iter().map(|v| v.abs()).sum(),
            Reduce::FrobSq => xv.frob_sq(),
            Reduce::Max => xv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        self.push(Op::Reduce(kind, x), Matrix::scalar(v))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.reduce(Reduce::Sum, x)
    }

    pub fn l1(&mut self, x: NodeId) -> NodeId {
        self.reduce(Reduce::L1, x)
    }

    pub fn frob_sq(&mut self, x: NodeId) -> NodeId {
        self.reduce(Reduce::FrobSq, x)
    }

    /// Selects column `cols[r]` from each row `r`, giving a column vector.
    pub fn pick(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if cols.len() != xv.rows() {
            return Err(Error::Dimension { op: "pick", left: xv.shape(), right: (cols.len(), 1) });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= xv.cols()) {
            return Err(contract(format!("pick column {bad} out of range for {} columns", xv.cols())));
        }
        let data = cols.iter().enumerate().map(|(r, &c)| xv.get(r, c)).collect();
        let v = Matrix::from_vec(cols.len(), 1, data)?;
        Ok(self.push(Op::Pick(x, cols.to_vec()), v))
    }

    /// Sum of scalar nodes; an empty list yields a constant zero.
    pub fn add_all(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let mut iter = xs.iter();
        let Some(&first) = iter.next() else {
            return Ok(self.constant(Matrix::scalar(0.0)));
        };
        let mut acc = first;
        for &x in iter {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Exact gradients of the scalar `loss` with respect to every learnable leaf.
    ///
    /// Leaves the loss does not depend on receive a zero matrix.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(contract(format!("backward needs a 1x1 loss, got {:?}", lv.shape())));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let ga = g.matmul_nt(self.value(*b))?;
                        accumulate(&mut adj, *a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = self.value(*a).matmul_tn(&g)?;
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::Transpose(a) => accumulate(&mut adj, *a, g.transpose()),
                Op::MulDiag(a, s) => {
                    let (av, sv) = (self.value(*a), self.value(*s));
                    let cols = av.cols();
                    if self.nodes[a.0].needs_grad {
                        let mut ga = g.clone();
                        if cols > 0 {
                            for row in ga.data_mut().chunks_mut(cols) {
                                for (x, &w) in row.iter_mut().zip(sv.data()) {
                                    *x *= w;
                                }
                            }
                        }
                        accumulate(&mut adj, *a, ga);
                    }
                    if self.nodes[s.0].needs_grad {
                        let mut gs = vec![0.0; cols];
                        if cols > 0 {
                            for (grow, arow) in g.data().chunks(cols).zip(av.data().chunks(cols)) {
                                for ((acc, &x), &y) in gs.iter_mut().zip(grow).zip(arow) {
                                    *acc += x * y;
                                }
                            }
                        }
                        accumulate(&mut adj, *s, Matrix::col_vector(&gs));
                    }
                }
                Op::Unary(kind, a) => {
                    let x = self.value(*a);
                    let local = match kind {
                        Elementwise::Relu => g.zip_with(x, "relu", |g, x| if x > 0.0 { g } else { 0.0 })?,
                        Elementwise::Sigmoid => node.value.zip_with(&g, "sigmoid", |y, g| g * y * (1.0 - y))?,
                        Elementwise::Abs => g.zip_with(x, "abs", |g, x| g * sign(x))?,
                        Elementwise::Square => g.zip_with(x, "square", |g, x| 2.0 * g * x)?,
                        _ => unreachable!("binary kind recorded as unary"),
                    };
                    accumulate(&mut adj, *a, local);
                }
                Op::Binary(kind, a, b) => {
                    let (ga, gb) = match kind {
                        Elementwise::Add => (g.clone(), g),
                        Elementwise::Sub => (g.clone(), g.scale(-1.0)),
                        Elementwise::Hadamard => {
                            let ga = g.zip_with(self.value(*b), "hadamard", |g, y| g * y)?;
                            let gb = g.zip_with(self.value(*a), "hadamard", |g, x| g * x)?;
                            (ga, gb)
                        }
                        _ => unreachable!("unary kind recorded as binary"),
                    };
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.scale(*c)),
                Op::ConcatRows(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let split = av.len();
                    let ga = Matrix::from_vec(av.rows(), av.cols(), g.data()[..split].to_vec())?;
                    let gb = Matrix::from_vec(bv.rows(), bv.cols(), g.data()[split..].to_vec())?;
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, *a, ga);
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, *b, gb);
                    }
                }
                Op::Ste(a) => accumulate(&mut adj, *a, g),
                Op::Reduce(kind, a) => {
                    let x = self.value(*a);
                    let up = g.item();
                    let local = match kind {
                        Reduce::Sum => Matrix::filled(x.rows(), x.cols(), up),
                        Reduce::L1 => x.map(|v| up * sign(v)),
                        Reduce::FrobSq => x.map(|v| 2.0 * up * v),
                        Reduce::Max => continue,
                    };
                    accumulate(&mut adj, *a, local);
                }
                Op::Pick(a, cols) => {
                    let x = self.value(*a);
                    let mut local = Matrix::zeros(x.rows(), x.cols());
                    for (r, &c) in cols.iter().enumerate() {
                        local.set(r, c, g.get(r, 0));
                    }
                    accumulate(&mut adj, *a, local);
                }
            }
        }

        let mut by_leaf = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let g = adj
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                by_leaf.insert(NodeId(idx), g);
            }
        }
        Ok(Grads { by_leaf })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut adj[id.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Global L2 norm over a set of gradient matrices.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Matrix>) -> f64 {
    grads.into_iter().map(Matrix::frob_sq).sum::<f64>().sqrt()
}

/// `θ ← θ − lr·g` for each parameter, after optional global-norm clipping.
///
/// When the gradient norm exceeds `clip`, every gradient is rescaled by
/// `clip / norm`. Returns the pre-clipping norm.
pub fn sgd_step(params: &mut [Matrix], grads: &[Matrix], lr: f64, clip: Option<f64>) -> Result<f64> {
    if params.len() != grads.len() {
        return Err(contract(format!("{} params but {} grads", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension { op: "sgd_step", left: p.shape(), right: g.shape() });
        }
    }
    let norm = global_norm(grads);
    let factor = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    if lr == 0.0 {
        return Ok(norm);
    }
    for (p, g) in params.iter_mut().zip(grads) {
        p.axpy(-lr * factor, g);
    }
    Ok(norm)
}
