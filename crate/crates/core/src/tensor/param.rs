use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{Element, Tensor};
use crate::error::{Error, Result};

impl<T> Clone for Entry<T> {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            value: Arc::clone(&self.value),
            trainable: self.trainable,
        }
    }
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a tensor inside one [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Globally unique handle: store identity plus index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u64,
    pub id: ParamId,
}

#[derive(Debug)]
struct Entry<T> {
    name: String,
    value: Arc<Tensor<T>>,
    trainable: bool,
}

/// Named, ordered collection of model tensors.
///
/// Trainable entries are parameters; the rest are buffers such as batchnorm
/// running statistics. A frozen store never enters a tape as a
/// differentiable leaf.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
    frozen: bool,
}

impl<T> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
            index: self.index.clone(),
            frozen: self.frozen,
        }
    }
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            index: HashMap::new(),
            frozen: false,
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value: Arc::new(value),
            trainable,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey { store: self.uid, id }
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

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        self.lookup(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::Invalid(format!("no parameter named `{name}`")))
    }

    /// Replace a tensor's value. The shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", &[e.value.shape(), value.shape()]));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Number of scalar entries across trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::<U>::new();
        for e in &self.entries {
            out.insert(&e.name, e.value.cast(), e.trainable);
        }
        out.frozen = self.frozen;
        out
    }

    /// Bitwise equality of names, flags and values.
    pub fn same_values(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.trainable == b.trainable
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
