use std::collections::HashMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Named parameters in a stable insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

/// Parameters registered as differentiable leaves of one graph.
#[derive(Debug, Clone)]
pub struct BoundParams<'a, T> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every parameter as a differentiable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParams<'_, T> {
        let vars = self.entries.iter().map(|(_, t)| graph.variable(t.clone())).collect();
        BoundParams { set: self, vars }
    }

    /// Registers every parameter as a constant leaf (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> BoundParams<'_, T> {
        let vars = self.entries.iter().map(|(_, t)| graph.constant(t.clone())).collect();
        BoundParams { set: self, vars }
    }
}

impl<T: Real> BoundParams<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.set
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    /// Per-parameter gradients in parameter order.
    pub fn grads(&self, gradients: &Gradients<T>) -> Vec<Vec<T>> {
        self.vars.iter().map(|&v| gradients.wrt(v)).collect()
    }
}
