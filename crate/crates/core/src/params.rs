//! Named-tensor parameter store with per-tensor trainable flags.
//!
//! All model weights live in one store under dotted namespaces
//! (`seg.encoder.*`, `unet.*`, `lora.*`). Training stages toggle trainable
//! flags; optimizers only ever touch flagged tensors.

use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .value
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
        }
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(p) = self.params.get_mut(name) {
            p.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Names whose tensors differ (bitwise) between two stores, including
    /// names present in only one of them.
    pub fn diff_names(&self, other: &ParameterStore) -> Vec<String> {
        let mut out = Vec::new();
        for (k, p) in &self.params {
            match other.params.get(k) {
                Some(q) => {
                    if p.value.shape() != q.value.shape()
                        || p.value
                            .data()
                            .iter()
                            .zip(q.value.data())
                            .any(|(a, b)| a.to_bits() != b.to_bits())
                    {
                        out.push(k.clone());
                    }
                }
                None => out.push(k.clone()),
            }
        }
        for k in other.params.keys() {
            if !self.params.contains_key(k) {
                out.push(k.clone());
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

/// Lazily binds store tensors to tape leaves so one forward pass shares a
/// single leaf per parameter, then maps gradients back by name.
#[derive(Default)]
pub struct ParamLeaves {
    ids: BTreeMap<String, NodeId>,
}

impl ParamLeaves {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, tape: &mut Tape, store: &ParameterStore, name: &str) -> NodeId {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = tape.leaf(store.tensor(name).clone());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn grads_by_name(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.ids {
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}
