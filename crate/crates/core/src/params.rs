//! Named parameter buffers and per-forward tape bindings.
//!
//! Parameters live outside the tape as plain buffers. Each forward pass
//! builds a [`Binding`] that lazily wraps the buffers it touches as leaf
//! tensors, so one graph never outlives a step and graphs built on
//! different threads never share nodes.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a buffer. Names are unique; registering a name twice panics
    /// because it means two modules were built with the same prefix.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(numel(shape), data.len(), "parameter {name}: shape/data mismatch");
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, shape: shape.to_vec(), data });
        id
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Copies values from `other` for every name present in both stores.
    /// Returns the names in `self` that were not found in `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Vec<String> {
        let mut missing = Vec::new();
        for e in &mut self.entries {
            match other.by_name(&e.name) {
                Some(src) if src.shape == e.shape => e.data.clone_from(&src.data),
                _ => missing.push(e.name.clone()),
            }
        }
        missing
    }
}

/// Leaf tensors for one forward pass.
pub struct Binding<'a> {
    store: &'a ParamStore,
    trainable: bool,
    leaves: RefCell<Vec<Option<Tensor>>>,
}

impl<'a> Binding<'a> {
    /// Leaves require gradients.
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true, leaves: RefCell::new(vec![None; store.len()]) }
    }

    /// Leaves are constants; nothing is recorded on the tape.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false, leaves: RefCell::new(vec![None; store.len()]) }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Substitutes a caller-owned tensor for one parameter.
    pub fn set(&self, id: ParamId, tensor: Tensor) {
        self.leaves.borrow_mut()[id.0] = Some(tensor);
    }

    pub fn get(&self, id: ParamId) -> Tensor {
        if let Some(t) = &self.leaves.borrow()[id.0] {
            return t.clone();
        }
        let e = self.store.get(id);
        let t = if self.trainable {
            Tensor::param(&e.shape, e.data.clone())
        } else {
            Tensor::new(&e.shape, e.data.clone())
        }
        .expect("store entries are shape-consistent");
        self.leaves.borrow_mut()[id.0] = Some(t.clone());
        t
    }

    /// Gradients accumulated on the leaves touched by this binding.
    pub fn gradients(&self) -> Gradients {
        Gradients(self.leaves.borrow().iter().map(|l| l.as_ref().and_then(Tensor::grad)).collect())
    }
}

/// One optional gradient buffer per parameter, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Gradients(vec![None; n])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0[id.0].as_deref()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (acc, g) in self.0.iter_mut().zip(&other.0) {
            let Some(g) = g else { continue };
            match acc {
                Some(a) => a.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => *acc = Some(g.clone()),
            }
        }
    }

    /// First parameter holding a non-finite gradient value.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.0
            .iter()
            .position(|g| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
            .map(ParamId)
    }
}
