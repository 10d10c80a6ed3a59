//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to tracked [`Var`]s together with
//! a vector-Jacobian closure. Nodes are appended in execution order, so the
//! tape is topologically sorted by construction and [`Tape::backward`] is a
//! single reverse sweep that visits each node once.
//!
//! Values are reference counted: a `Var` owns its value, and a node only keeps
//! what its closure captured. On a non-recording tape ([`Tape::no_grad`])
//! nothing is retained, so intermediates are freed as soon as they go out of
//! scope.

mod fused;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use fused::{indexed_attention, indexed_attention_probs, AttnCounter, KeySets};
pub use ops::{gelu, sigmoid, softmax_slice, softmax_tensor, softplus, top_k_indices, xlogx};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    /// `None` marks a leaf.
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that records nothing; every `Var` it produces is a constant.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        let id = if self.recording {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: vec![],
                backward: None,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self,
            id,
            value,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor>) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    pub(crate) fn record<'t, F>(&'t self, inputs: &[&Var<'t>], value: Tensor, backward: F) -> Var<'t>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let value = Rc::new(value);
        let tracked = self.recording && inputs.iter().any(|v| v.id.is_some());
        let id = if tracked {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: inputs.iter().map(|v| v.id).collect(),
                backward: Some(Box::new(backward)),
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            tape: self,
            id,
            value,
        }
    }

    /// Gradients of the scalar `loss` with respect to every leaf on the tape.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        for i in (0..=root).rev() {
            let node = &nodes[i];
            let Some(bw) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = bw(&g, &needs);
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(j), Some(ig)) = (slot, ig) {
                    match &mut grads[*j] {
                        Some(acc) => acc.add_assign(&ig),
                        empty => *empty = Some(ig),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.id.and_then(|i| self.grads.get(i)).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: &Var<'_>) -> Option<Tensor> {
        var.id.and_then(|i| self.grads.get_mut(i)).and_then(Option::take)
    }
}

/// A value living on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant_rc(Rc::clone(&self.value))
    }

    /// A constant on the same tape.
    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }
}

#[cfg(test)]
mod tests;
