//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! A [`Graph`] owns every node. Operations evaluate eagerly when they are
//! recorded, so a freshly built graph is already forward-evaluated. The
//! recorded operations can be replayed with [`Graph::forward_eval`] after
//! leaf values change, which is what the finite-difference checker relies on.
//!
//! Gradients are only stored on leaves created with `requires_grad`.
//! [`Graph::backward`] accumulates into those buffers; call
//! [`Graph::zero_grad`] to reset them.

pub mod gradcheck;
mod ops;

use std::sync::Arc;

use crate::error::{contract, GrafitError, Result};
use crate::matrix::Matrix;

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tensor(usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    AddBias(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor, f64),
    Neg(Tensor),
    Relu(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    BatchNormTrain { x: Tensor, gamma: Tensor, beta: Tensor },
    BatchNormEval { x: Tensor, gamma: Tensor, beta: Tensor, mean: Arc<[f64]>, var: Arc<[f64]> },
    L2Normalize(Tensor),
    CosineRows(Tensor, Tensor),
    LogSumExpRows { x: Tensor, mask: Option<Arc<[bool]>> },
    Gather { x: Tensor, indices: Arc<[usize]> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Neg(..) => "neg",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::L2Normalize(..) => "l2_normalize",
            Op::CosineRows(..) => "cosine_rows",
            Op::LogSumExpRows { .. } => "logsumexp_rows",
            Op::Gather { .. } => "gather",
        }
    }

    fn inputs(&self) -> Vec<Tensor> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::CosineRows(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Neg(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L2Normalize(a)
            | Op::LogSumExpRows { x: a, .. }
            | Op::Gather { x: a, .. } => vec![a],
            Op::BatchNormTrain { x, gamma, beta } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    /// Op-specific forward intermediates reused by the backward pass.
    pub(crate) cache: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    degenerate_rows: usize,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of rows that hit the L2-normalization degenerate branch
    /// (norm below `1e-9`) since the graph was created.
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }

    pub fn leaf(&mut self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(GrafitError::Shape { op: "leaf", left: shape.to_vec(), right: vec![values.len()] });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GrafitError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { shape: shape.to_vec(), value: values, grad: None, op: Op::Leaf, requires_grad, cache: Vec::new() });
        Ok(Tensor(self.nodes.len() - 1))
    }

    pub fn param(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(values, shape, true)
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.leaf(values, shape, false)
    }

    pub fn constant_matrix(&mut self, m: &Matrix) -> Result<Tensor> {
        self.constant(m.as_slice().to_vec(), &[m.rows(), m.cols()])
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.nodes[t.0].value.len(), 1);
        self.nodes[t.0].value[0]
    }

    /// Copy of a rank-2 tensor as a [`Matrix`].
    pub fn to_matrix(&self, t: Tensor) -> Matrix {
        let node = &self.nodes[t.0];
        let (r, c) = match node.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => (1, node.value.len()),
        };
        Matrix::from_vec(r, c, node.value.clone())
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Per-column batch mean and biased variance of a training-mode
    /// batch-norm node.
    pub fn batch_stats(&self, t: Tensor) -> Option<(&[f64], &[f64])> {
        let node = &self.nodes[t.0];
        match node.op {
            Op::BatchNormTrain { .. } => {
                let m = node.shape[1];
                Some((&node.cache[..m], &node.cache[m..2 * m]))
            }
            _ => None,
        }
    }

    /// Replaces the values of a leaf. Dependent nodes are stale until
    /// [`Graph::forward_eval`] runs.
    pub fn set_value(&mut self, t: Tensor, values: Vec<f64>) -> Result<()> {
        let node = &mut self.nodes[t.0];
        contract!(matches!(node.op, Op::Leaf), "set_value on a non-leaf tensor");
        if values.len() != node.value.len() {
            return Err(GrafitError::Shape { op: "set_value", left: node.shape.clone(), right: vec![values.len()] });
        }
        node.value = values;
        Ok(())
    }

    /// Re-evaluates every recorded operation up to and including `root`
    /// from the current leaf values and returns the root's values.
    pub fn forward_eval(&mut self, root: Tensor) -> Result<&[f64]> {
        for i in 0..=root.0 {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let out = ops::compute(self, &op)?;
            let node = &mut self.nodes[i];
            node.shape = out.shape;
            node.value = out.value;
            node.cache = out.cache;
        }
        Ok(&self.nodes[root.0].value)
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    /// Back-propagates from a scalar root, accumulating d(root)/d(leaf) into
    /// every `requires_grad` leaf reachable from it.
    pub fn backward(&mut self, root: Tensor) -> Result<()> {
        let n = numel(&self.nodes[root.0].shape);
        contract!(n == 1, "backward requires a scalar root, got shape {:?}", self.nodes[root.0].shape);
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(upstream) = adjoints[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(g) => g.iter_mut().zip(&upstream).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(upstream),
                }
                continue;
            }
            ops::propagate(self, i, &upstream, &mut adjoints);
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Tensor> {
        let out = ops::compute(self, &op)?;
        let requires_grad = op.inputs().iter().any(|t| self.nodes[t.0].requires_grad);
        if let Op::L2Normalize(_) = op {
            let degenerate = out.cache.iter().filter(|&&r| r < crate::matrix::NORM_FLOOR).count();
            if degenerate > 0 {
                log::warn!("l2_normalize: {degenerate} degenerate row(s) mapped to zero");
                self.degenerate_rows += degenerate;
            }
        }
        self.nodes.push(Node { shape: out.shape, value: out.value, grad: None, op, requires_grad, cache: out.cache });
        Ok(Tensor(self.nodes.len() - 1))
    }

    pub(crate) fn node(&self, t: Tensor) -> &Node {
        &self.nodes[t.0]
    }

    /// `[n,k] x [k,m] -> [n,m]`
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.push(Op::MatMul(a, b))
    }

    /// Adds a `[m]` bias to every row of a `[n,m]` tensor.
    pub fn add_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        self.push(Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn neg(&mut self, a: Tensor) -> Result<Tensor> {
        self.push(Op::Neg(a))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        self.push(Op::Relu(a))
    }

    pub fn exp(&mut self, a: Tensor) -> Result<Tensor> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        self.push(Op::Log(a))
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        self.push(Op::Mean(a))
    }

    /// Batch normalization over the rows of `[n,m]` using per-batch
    /// statistics (biased variance).
    pub fn batch_norm_train(&mut self, x: Tensor, gamma: Tensor, beta: Tensor) -> Result<Tensor> {
        self.push(Op::BatchNormTrain { x, gamma, beta })
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, running_mean: &[f64], running_var: &[f64]) -> Result<Tensor> {
        self.push(Op::BatchNormEval { x, gamma, beta, mean: running_mean.into(), var: running_var.into() })
    }

    /// Scales each row of `[n,d]` to unit L2 norm. Rows with norm below
    /// `1e-9` map to zero and pass no gradient.
    pub fn l2_normalize_rows(&mut self, x: Tensor) -> Result<Tensor> {
        self.push(Op::L2Normalize(x))
    }

    /// Row-wise cosine similarity of two `[n,d]` tensors, giving `[n]`.
    pub fn cosine_rows(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.push(Op::CosineRows(a, b))
    }

    /// Stabilized row-wise log-sum-exp of `[n,m]`, giving `[n]`.
    pub fn logsumexp_rows(&mut self, x: Tensor) -> Result<Tensor> {
        self.push(Op::LogSumExpRows { x, mask: None })
    }

    /// Row-wise log-sum-exp restricted to entries where `mask` is true.
    /// A row with no selected entry yields a numeric error.
    pub fn logsumexp_rows_masked(&mut self, x: Tensor, mask: Vec<bool>) -> Result<Tensor> {
        self.push(Op::LogSumExpRows { x, mask: Some(mask.into()) })
    }

    /// Picks `x[i, indices[i]]` from each row, giving `[n]`.
    pub fn gather(&mut self, x: Tensor, indices: Vec<usize>) -> Result<Tensor> {
        self.push(Op::Gather { x, indices: indices.into() })
    }
}

#[cfg(test)]
mod tests;
