//! Named parameter storage shared by every model.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Ordered collection of named weight tensors. Order is insertion order and
/// is what checkpoints and optimizers iterate over.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).copied().map(move |i| &mut self.entries[i].1)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::config(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Declare one parameter leaf per entry.
    pub fn declare(&self, graph: &mut Graph) -> ParamLeaves {
        let map = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), graph.parameter(n.clone(), t.rows(), t.cols())))
            .collect();
        ParamLeaves { map }
    }
}

/// Parameter name to graph leaf, for one graph.
#[derive(Debug, Clone, Default)]
pub struct ParamLeaves {
    map: Vec<(String, NodeId)>,
}

impl ParamLeaves {
    pub fn get(&self, name: &str) -> NodeId {
        self.map
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("parameter '{name}' was not declared"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.map.iter().map(|(n, id)| (n.as_str(), *id))
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.map.iter().map(|(_, id)| *id).collect()
    }

    pub fn bind<'a>(&self, store: &'a ParamStore, bindings: &mut crate::autodiff::Bindings<'a>) -> Result<()> {
        for (name, id) in &self.map {
            bindings.bind(*id, store.expect(name)?);
        }
        Ok(())
    }
}

/// Values for named non-trainable graph inputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuxInputs {
    values: Vec<(String, Tensor)>,
}

impl AuxInputs {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.values.push((name.into(), value));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Bind every value whose name is an input leaf of `graph`.
    pub fn bind<'a>(&'a self, graph: &Graph, bindings: &mut crate::autodiff::Bindings<'a>) {
        for (name, t) in &self.values {
            if let Some(id) = graph.leaf(name) {
                bindings.bind(id, t);
            }
        }
    }
}

/// Glorot-uniform matrix: entries in `+-sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng::uniform(rng, -limit, limit))
}
