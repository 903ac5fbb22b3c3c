use std::collections::BTreeMap;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Inserts a parameter, rejecting duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
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

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore {
            params: iter.into_iter().collect(),
        }
    }
}

/// Registers parameters on a tape the first time they are requested.
///
/// Only parameters a forward pass actually touches are copied onto the tape.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder {
            store,
            bound: BTreeMap::new(),
            trainable: true,
        }
    }

    /// A binder whose parameters are recorded as constants (inference only).
    pub fn frozen(store: &'a ParamStore) -> Self {
        Binder {
            trainable: false,
            ..Binder::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds `name`, checking its shape.
    pub fn bind_shaped(&mut self, tape: &mut Tape, name: &str, shape: &[usize]) -> Result<Var> {
        let v = self.bind(tape, name)?;
        if tape.shape(v) != shape {
            return Err(Error::shape("bind", tape.shape(v), shape));
        }
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients keyed by parameter name; unbound parameters get zeros.
    pub fn named_gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.store
            .iter()
            .map(|(name, t)| {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|&v| grads.get(v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}
