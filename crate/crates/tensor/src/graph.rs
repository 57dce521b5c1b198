//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles in
//! execution order, so the tape is already topologically sorted and the
//! backward pass is a single reverse sweep.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{usage_err, Error, Result};
use crate::param::ParamId;
use crate::tensor::Tensor;

/// Vector-Jacobian product of one node: given the gradient of the node's
/// output and a mask of which inputs need gradients, returns one optional
/// gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
struct Scopes {
    stack: Vec<String>,
    macs: BTreeMap<String, u64>,
}

/// Operation tape. One forward/backward at a time; not `Sync`.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    scopes: RefCell<Scopes>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), scopes: RefCell::new(Scopes::default()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_arc(Arc::new(value), false, None)
    }

    /// A leaf that collects gradients (e.g. an input under gradient check).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_arc(Arc::new(value), true, None)
    }

    pub(crate) fn param_leaf(&self, value: Arc<Tensor<T>>, id: ParamId) -> Var<'_, T> {
        self.leaf_arc(value, true, Some(id))
    }

    fn leaf_arc(&self, value: Arc<Tensor<T>>, requires_grad: bool, param: Option<ParamId>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, inputs: Vec::new(), backward: None, requires_grad, param });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Records an operation result. The backward closure is dropped when no
    /// input needs a gradient.
    pub(crate) fn push(
        &self,
        value: impl Into<Arc<Tensor<T>>>,
        inputs: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        let value = value.into();
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            inputs: ids,
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Var { graph: self, id: nodes.len() - 1 }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Enters a named scope; multiply-accumulate counts recorded while the
    /// guard lives are attributed to the dotted scope path.
    pub fn scope(&self, name: &str) -> ScopeGuard<'_, T> {
        self.scopes.borrow_mut().stack.push(name.to_string());
        ScopeGuard { graph: self }
    }

    pub fn scope_path(&self) -> String {
        self.scopes.borrow().stack.join(".")
    }

    pub(crate) fn add_macs(&self, macs: u64) {
        let mut scopes = self.scopes.borrow_mut();
        let key = scopes.stack.join(".");
        *scopes.macs.entry(key).or_insert(0) += macs;
    }

    /// Multiply-accumulates recorded so far, keyed by scope path.
    pub fn macs_by_scope(&self) -> BTreeMap<String, u64> {
        self.scopes.borrow().macs.clone()
    }

    pub fn total_macs(&self) -> u64 {
        self.scopes.borrow().macs.values().sum()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(usage_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !loss_node.requires_grad {
            return Ok(Grads { grads, params: Vec::new() });
        }
        grads[loss.id] = Some(Tensor::full(loss_node.value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad_out) = grads[id].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = backward(&grad_out, &need);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input, g), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                let Some(g) = g else { continue };
                if !needed {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[input].value.shape(), "gradient shape for node {input}");
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Grads { grads, params })
    }
}

pub struct ScopeGuard<'g, T> {
    graph: &'g Graph<T>,
}

impl<T> Drop for ScopeGuard<'_, T> {
    fn drop(&mut self) {
        self.graph.scopes.borrow_mut().stack.pop();
    }
}

/// Gradients produced by [`Graph::backward`]. Only leaves keep theirs.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Element> Grads<T> {
    /// Gradient of a leaf; `None` when it was unreachable from the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// `(param, gradient)` pairs, one per parameter leaf reached.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, node)| self.grads[node].as_ref().map(|g| (p, g)))
    }
}

impl<'g, T: Element> Var<'g, T> {
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    /// Fails with a numeric error naming `location` if any value is NaN/Inf.
    pub fn ensure_finite(self, location: &str) -> Result<Self> {
        let value = self.value();
        match value.data().iter().position(|v| !v.is_finite()) {
            None => Ok(self),
            Some(i) => Err(Error::Numeric {
                location: location.to_string(),
                detail: format!("element {i} of {:?} is {}", value.shape(), value.data()[i]),
            }),
        }
    }
}
