use std::collections::HashMap;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{config_err, Result};
use crate::graph::{Grads, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A trainable tensor with a hierarchical name such as
/// `stage1.block2.dwconv.weight`.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    /// Same shape as `value` when present.
    pub grad: Option<Tensor<T>>,
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameters and buffers of one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    index: HashMap<String, Slot>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), index: HashMap::new() }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(config_err(format!("duplicate tensor name `{name}`")));
        }
        self.index.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.claim(name, Slot::Param(self.params.len()))?;
        self.params.push(Parameter { name: name.to_string(), value: Arc::new(value), grad: None });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        self.claim(name, Slot::Buffer(self.buffers.len()))?;
        self.buffers.push(Buffer { name: name.to_string(), value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        match self.index.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.index.get(name) {
            Some(Slot::Buffer(i)) => Some(BufferId(*i)),
            _ => None,
        }
    }

    /// Mutable access to a parameter's values (copy-on-write if a graph or
    /// a cloned store still shares them).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    /// Records the parameter on `graph` as a gradient-collecting leaf.
    pub fn var<'g>(&self, graph: &'g Graph<T>, id: ParamId) -> Var<'g, T> {
        graph.param_leaf(Arc::clone(&self.params[id.0].value), id)
    }

    /// Sum of element counts over all parameters.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds `grads` into each parameter's accumulator.
    pub fn accumulate(&mut self, grads: &Grads<T>) {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Element precision conversion of every tensor; gradients are dropped.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: Arc::new(p.value.cast()), grad: None })
                .collect(),
            buffers: self.buffers.iter().map(|b| Buffer { name: b.name.clone(), value: b.value.cast() }).collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_across_params_and_buffers() {
        let mut store = ParamStore::<f32>::new();
        store.add_param("a.weight", Tensor::zeros(&[2])).unwrap();
        assert!(store.add_param("a.weight", Tensor::zeros(&[2])).is_err());
        assert!(store.add_buffer("a.weight", Tensor::zeros(&[2])).is_err());
        store.add_buffer("a.running_mean", Tensor::zeros(&[2])).unwrap();
        assert_eq!(store.num_params(), 2);
    }
}
