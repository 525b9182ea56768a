//! Dynamic reverse-mode tape.
//!
//! Nodes are appended in execution order, so walking the node list
//! backwards is a valid reverse topological order and visits every node
//! once. Gradient contributions are accumulated in that fixed order, which
//! keeps results reproducible run to run.

use std::sync::Arc;

use super::{numel, Element, SelectionIndex, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Sigmoid,
    Gelu,
    Relu6,
    Exp,
    Log,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var, usize),
    Attention { q: Var, k: Var, v: Var, scale: T, probs: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
    ChannelNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
    Conv2d { x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize, groups: usize },
    AvgPool2d { x: Var, window: usize, stride: usize },
    Upsample { x: Var, factor: usize },
    SpatialMean(Var),
    Gather { x: Var, sel: Arc<SelectionIndex> },
    Scatter { base: Var, tokens: Var, sel: Arc<SelectionIndex>, residual: bool },
    RowLookup { table: Var, sel: Arc<SelectionIndex> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Records differentiable operations for one execution context.
///
/// A tape is not meant to be shared between threads while recording; run
/// independent contexts on independent tapes.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Records an input; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Records an input that is never differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`.
    ///
    /// Available for leaves that require grad; intermediate gradients are
    /// released during the backward sweep.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0)?.value.grad.as_deref()
    }

    /// Populates gradients of the scalar `loss` for every leaf requiring grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            let contributions = self.backprop(i, &g)?;
            for (v, c) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a = *a + *b),
                    slot => *slot = Some(c),
                }
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(self.grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let n = node.value.len();
                node.value.grad = Some(g.take().unwrap_or_else(|| vec![T::zero(); n]));
            }
        }
        self.grads.clear();
        Ok(())
    }

    pub(crate) fn numel(&self, v: Var) -> usize {
        numel(self.shape(v))
    }
}
