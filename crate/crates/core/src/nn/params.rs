use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// Named parameters, iterated in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

/// Graph leaves created for a set of parameters.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl FromIterator<(String, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bindings {
            vars: iter.into_iter().collect(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, tensor.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Binds every parameter as a leaf. With `track = false` the leaves do
    /// not record gradients (inference).
    pub fn bind(&self, g: &mut Graph<T>, track: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let mut leaf = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
                leaf.requires_grad = track;
                (name.clone(), g.leaf(leaf))
            })
            .collect();
        Bindings { vars }
    }

    /// Adds the graph's leaf gradients into each parameter's `grad`.
    /// Parameters the loss never reached receive an explicit zero.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bindings: &Bindings) {
        for (name, var) in bindings.iter() {
            if let Some(p) = self.params.get_mut(name) {
                match g.grad(var) {
                    Some(d) => p.accumulate_grad(d),
                    None => {
                        let n = p.numel();
                        p.grad.get_or_insert_with(|| vec![T::zero(); n]);
                    }
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.zero_grad();
        }
    }

    /// Clears gradient buffers entirely (no gradient populated).
    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if let Some(name) = other.params.keys().find(|n| !self.params.contains_key(*n)) {
            return Err(Error::Checkpoint(format!(
                "checkpoint has unexpected parameter `{name}`"
            )));
        }
        for (name, dst) in self.params.iter_mut() {
            let src = other.params.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing parameter `{name}`"))
            })?;
            if src.shape() != dst.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: dst.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
            dst.grad = None;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}
