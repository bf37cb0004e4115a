use std::collections::HashMap;
use std::ops::Index;

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named model parameters with per-entry trainability.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

/// Tape leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Leaves supplied by the caller, one per store entry in id order; used
    /// when a gradient check owns the leaves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Param {
            name,
            value,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Set trainability of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.entries {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total scalar count, optionally restricted to trainable entries.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Scalar count of entries whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|p| p.name.starts_with(prefix) && (p.trainable || !trainable_only))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Record every parameter on `tape`: trainable ones as tracked leaves keyed
    /// by their id, frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.entries
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if p.trainable {
                        tape.param(p.value.clone(), i)
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values by name from `other`; every name in `other` must exist
    /// here with the same shape. Trainability is left unchanged.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &other.entries {
            let id = self
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", p.name)))?;
            let dst = &mut self.entries[id.0].value;
            if dst.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, checkpoint holds {:?}",
                    p.name,
                    dst.shape(),
                    p.value.shape()
                )));
            }
            *dst = p.value.clone();
        }
        Ok(())
    }

    /// Sub-store of the entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in self.entries.iter().filter(|p| p.name.starts_with(prefix)) {
            let id = out.add(p.name.clone(), p.value.clone()).expect("names are unique");
            out.set_trainable(id, p.trainable);
        }
        out
    }
}
