use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;

/// First and second moment estimates of the adaptive optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentState {
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

/// Named trainable arrays plus optimizer bookkeeping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    pub step: u64,
    pub moments: Option<MomentState>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<(), AutodiffError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        self.params.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, AutodiffError> {
        self.params
            .get(name)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, AutodiffError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records the named parameter on `tape` as a trainable leaf.
    pub fn load(&self, tape: &mut Tape, name: &str) -> Result<Var, AutodiffError> {
        let t = self.get(name)?.clone();
        Ok(tape.param(name, t))
    }

    /// Records the named parameter as a constant (no gradient).
    pub fn load_frozen(&self, tape: &mut Tape, name: &str) -> Result<Var, AutodiffError> {
        let t = self.get(name)?.clone();
        Ok(tape.constant(t))
    }

    /// Moves every parameter whose name starts with `prefix` into a new store.
    pub fn subset(&self, prefix: &str) -> ParameterStore {
        ParameterStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            step: 0,
            moments: None,
        }
    }

    /// Adds every parameter of `other`; names must not collide.
    pub fn merge(&mut self, other: ParameterStore) -> Result<(), AutodiffError> {
        for (k, v) in other.params {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Completes a gradient map with explicit zeros for parameters that were
    /// never recorded on the tape.
    pub fn complete_gradients(&self, grads: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| {
                let g = grads
                    .get(k)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()));
                (k.clone(), g)
            })
            .collect()
    }
}
