use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named learnable arrays, kept in name order so that every traversal
/// (initialization, updates, serialization) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Copies every entry of `other` whose name starts with one of `prefixes`.
    pub fn merge_prefixed(&mut self, other: &ParamStore, prefixes: &[&str]) {
        for (k, v) in &other.map {
            if prefixes.iter().any(|p| k.starts_with(p)) {
                self.map.insert(k.clone(), v.clone());
            }
        }
    }

    /// Registers every array as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Like [`bind`](Self::bind) but registers the arrays as constants.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), g.constant(v.clone())))
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    /// Collects the gradients of every bound parameter after `g.backward`.
    /// Parameters the root does not depend on get zero gradients.
    pub fn gradients(&self, g: &Graph) -> Gradients {
        let map = self
            .vars
            .iter()
            .map(|(k, &v)| {
                let grad = g
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
                (k.clone(), grad)
            })
            .collect();
        Gradients { map }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    /// Element-wise accumulation; names missing on either side are kept.
    pub fn accumulate(&mut self, other: Gradients) {
        for (k, v) in other.map {
            match self.map.get_mut(&k) {
                Some(acc) => acc.add_assign(&v),
                None => {
                    self.map.insert(k, v);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.map.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
