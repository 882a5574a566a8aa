use std::sync::Arc;

use crate::{Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone)]
struct Entry<T> {
    name: String,
    value: Arc<Tensor<T>>,
}

/// Owns every trainable tensor of a model.
///
/// Modules hold [`ParamId`]s into the store, so two code paths that hold the
/// same id read and update the same storage.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|e| (&e.name, e.value.shape())))
            .finish()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, pid: ParamId) -> &str {
        &self.entries[pid.0].name
    }

    pub fn get(&self, pid: ParamId) -> &Tensor<T> {
        &self.entries[pid.0].value
    }

    pub(crate) fn shared(&self, pid: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[pid.0].value)
    }

    /// Mutable access; clones only if a live graph still holds the tensor.
    pub fn get_mut(&mut self, pid: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[pid.0].value)
    }

    pub fn set(&mut self, pid: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.get(pid).shape(),
            value.shape(),
            "shape change for parameter {}",
            self.name(pid)
        );
        self.entries[pid.0].value = Arc::new(value);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Parameter count over names starting with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), e.value.as_ref()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: Arc::new(e.value.cast()),
                })
                .collect(),
        }
    }
}
