use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Write access to input gradients while one node's backward rule runs.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> GradSink<'a> {
    pub(crate) fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of `v`, or `None` if `v` does not need one.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }
}

/// Tape of differentiable operations.
///
/// Nodes are appended in evaluation order, so creation order is a valid
/// topological order. A graph can be differentiated once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    /// Records a leaf. It participates in differentiation iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.push_node(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value.with_requires_grad(false), false, None)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_node(value.with_requires_grad(true), true, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn backward_done(&self) -> bool {
        self.backward_done
    }

    /// Back-propagates from the scalar `loss`. A loss that does not depend on
    /// any gradient-requiring leaf is a no-op.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(out_grad) = self.grads[i].take() else {
                continue;
            };
            if let Some(rule) = &self.nodes[i].backward {
                let mut sink = GradSink {
                    nodes: &self.nodes,
                    grads: &mut self.grads,
                };
                rule(&out_grad, &mut sink);
            }
            self.grads[i] = Some(out_grad);
        }
        Ok(())
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records the result of an op. The backward rule is kept only when some
    /// input needs a gradient.
    pub(crate) fn push_op<F>(&mut self, value: Tensor, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&[f64], &mut GradSink<'_>) + 'static,
    {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let rule: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(value, requires_grad, rule)
    }
}
