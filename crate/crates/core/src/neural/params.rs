use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer.
    Weight,
    /// Running statistics, updated by forward passes only.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
    pub frozen: bool,
}

/// Named parameter and gradient tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

fn matches_prefix(name: &str, prefixes: &[&str]) -> bool {
    prefixes.is_empty()
        || prefixes
            .iter()
            .any(|p| name == *p || (name.starts_with(p) && name.as_bytes().get(p.len()) == Some(&b'.')))
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let grad = Tensor::zeros(&value.shape);
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            kind,
            frozen: false,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].grad
    }

    /// Parameter value together with its gradient buffer, or `None` for the
    /// gradient when the parameter is frozen.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&Tensor<T>, Option<&mut Tensor<T>>) {
        let e = &mut self.entries[id.0];
        let grad = if e.frozen { None } else { Some(&mut e.grad) };
        (&e.value, grad)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    /// Freeze or unfreeze every tensor under the given name prefixes.
    pub fn set_frozen(&mut self, prefixes: &[&str], frozen: bool) {
        for e in &mut self.entries {
            if matches_prefix(&e.name, prefixes) {
                e.frozen = frozen;
            }
        }
    }

    /// True when every tensor under `prefix` is frozen.
    pub fn all_frozen(&self, prefix: &str) -> bool {
        self.entries
            .iter()
            .filter(|e| matches_prefix(&e.name, &[prefix]))
            .all(|e| e.frozen)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                    kind: e.kind,
                    frozen: e.frozen,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// A store holding only the tensors under `prefixes`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for e in self.entries.iter().filter(|e| matches_prefix(&e.name, prefixes)) {
            let id = out.add(e.name.clone(), e.value.clone(), e.kind);
            out.entries[id.0].frozen = e.frozen;
        }
        out
    }

    /// Copy values and freeze flags from `src` into every tensor of `self`
    /// under `prefixes`. Fails on the first missing or mis-shaped tensor.
    pub fn load_from<U: Real>(&mut self, src: &ParamStore<U>, prefixes: &[&str]) -> Result<()> {
        for e in self.entries.iter_mut().filter(|e| matches_prefix(&e.name, prefixes)) {
            let s = src
                .get(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` missing from checkpoint", e.name)))?;
            if s.value.shape != e.value.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?} in checkpoint, model expects {:?}",
                    e.name, s.value.shape, e.value.shape
                )));
            }
            e.value = s.value.cast();
            e.frozen = s.frozen;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values of tensors under `prefixes`.
    pub fn digest(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| matches_prefix(&e.name, prefixes)) {
            h.update(e.name.as_bytes());
            for d in &e.value.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &e.value.data {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn num_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.value.len())
            .sum()
    }
}
