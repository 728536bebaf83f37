//! Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
//! sweep over the node list is a valid topological order for backward.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Inputs handed to a node's backward closure.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f32],
    /// Which inputs need a gradient; others may be skipped (`None`).
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<Vec<f32>>>>;

struct Node {
    value: Tensor,
    /// Full-precision value for scalar reductions.
    scalar: Option<f64>,
    grad: Option<Vec<f32>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            scalar: None,
            grad: None,
            parents: vec![],
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value at full precision where the op computed one.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.scalar.unwrap_or_else(|| n.value.item() as f64)
    }

    /// f64 value of a scalar node, if it has one.
    pub(crate) fn scalar_opt(&self, v: Var) -> Option<f64> {
        let n = &self.nodes[v.0];
        n.value.is_scalar().then(|| self.scalar(v))
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        self.push_with_scalar(value, None, parents, backward)
    }

    pub(crate) fn push_with_scalar(
        &mut self,
        value: Tensor,
        scalar: Option<f64>,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            scalar,
            grad: None,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagate from a scalar loss. Gradients are kept on leaves only and
    /// add onto whatever earlier calls left behind until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Backpropagate an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_with(&mut self, out: Var, seed: Vec<f32>) -> Result<()> {
        if seed.len() != self.nodes[out.0].value.numel() {
            return Err(Error::Shape(format!(
                "seed of {} values for output of {}",
                seed.len(),
                self.nodes[out.0].value.numel()
            )));
        }
        let mut pass: Vec<Option<Vec<f32>>> = vec![None; out.0 + 1];
        pass[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(grad) = pass[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let ctx = BackwardCtx {
                    inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                    output: &node.value,
                    grad: &grad,
                    needs: node
                        .parents
                        .iter()
                        .map(|&p| self.nodes[p].requires_grad)
                        .collect(),
                };
                let grads = bw(&ctx);
                debug_assert_eq!(grads.len(), node.parents.len());
                for (&p, g) in node.parents.iter().zip(grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match &mut pass[p] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            let node = &mut self.nodes[i];
            if node.requires_grad && node.parents.is_empty() {
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&grad) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }
}
