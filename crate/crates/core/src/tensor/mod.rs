//! Dense tensor arithmetic with tape-based reverse-mode automatic
//! differentiation.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node exactly once. Gradients accumulate additively across
//! fan-out. Tapes are cheap and meant to be rebuilt for every optimization
//! step; parameters live outside the tape (see [`crate::param::Param`]) and
//! are inserted as leaves per step.

mod backward;
mod check;
mod ops;

pub use check::{cosine, finite_diff_check};
pub use ops::{add_row_slices, matmul_slices, transpose_slice};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Scale { a: usize, c: f64 },
    Mul { a: usize, b: usize },
    Sum { a: usize },
    MeanRows { a: usize },
    ConcatRows { parts: Vec<usize> },
    GatherRows { a: usize, rows: Vec<usize> },
    Reshape { a: usize },
    SoftmaxRows { a: usize, tau: f64 },
    LayerNormRows { a: usize, eps: f64 },
    Gelu { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize> },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    /// Whether gradients should flow into this node.
    pub(crate) track: bool,
    pub(crate) op: Op,
}

#[derive(Debug, Default)]
pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Node>,
}

/// Records operations in topological (creation) order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<TapeInner>>,
}

/// A handle to one node on a [`Tape`]: a dense array with shape, values and,
/// after a backward pass, an optional gradient.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Creates a leaf tensor. `requires_grad` marks it as a gradient target.
    pub fn leaf(&self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Contract(format!(
                "leaf values length {} does not match shape {:?}",
                values.len(),
                shape
            )));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// Inserts the current values of a parameter as a leaf.
    pub fn leaf_param(&self, param: &crate::param::Param, requires_grad: bool) -> Tensor {
        self.leaf(&param.shape(), param.values(), requires_grad)
            .expect("parameter invariant guarantees shape/length agreement")
    }

    pub(crate) fn push(&self, shape: Vec<usize>, values: Vec<f64>, track: bool, op: Op) -> Tensor {
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            values,
            grad: None,
            track,
            op,
        });
        Tensor {
            tape: self.clone(),
            id,
        }
    }
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].values.len()
    }

    /// Clones the values out of the tape.
    pub fn values(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].values.clone()
    }

    /// The single value of a scalar tensor.
    pub fn scalar(&self) -> Result<f64> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.values.len() != 1 {
            return Err(Error::Contract(format!(
                "scalar() on tensor of shape {:?}",
                node.shape
            )));
        }
        Ok(node.values[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].track
    }

    /// Gradient populated by the most recent backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub(crate) fn same_tape(&self, other: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::Contract(
                "operands belong to different tapes".into(),
            ))
        }
    }
}

/// Temperature softmax of one row, with max-subtraction for stability.
/// Shared by the tape operation and by inference-time weight precomputation
/// so both produce bit-identical results.
pub fn softmax_temp_slice(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}
