use std::collections::BTreeSet;

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    group: String,
    tensor: Tensor,
}

/// Named trainable tensors, each belonging to one optimizer group.
///
/// Frozen groups are bound as constants, so no gradient reaches them and the
/// optimizer never touches them.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    frozen: BTreeSet<String>,
}

/// Tape leaves for every parameter of a store, indexed by [`ParamId`].
pub struct Bindings<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bindings<'t> {
    /// Uses caller-supplied vars, in store order, in place of the stored
    /// tensors. Gradient checks bind their perturbed inputs this way.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Bindings { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let group = group.into();
        let frozen = self.frozen.contains(&group);
        self.entries.push(Entry {
            name,
            group,
            tensor: tensor.with_requires_grad(!frozen),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> &str {
        &self.entries[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn group_ids<'a>(&'a self, group: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.entries[id.0].group == group)
    }

    pub fn set_group_frozen(&mut self, group: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(group.to_string());
        } else {
            self.frozen.remove(group);
        }
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.tensor.requires_grad = !frozen;
            if frozen {
                e.tensor.grad = None;
            }
        }
    }

    pub fn is_group_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&self.entries[id.0].group)
    }

    /// Binds every tensor as a leaf; frozen ones become constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bindings<'t> {
        Bindings {
            vars: self.entries.iter().map(|e| tape.leaf(&e.tensor)).collect(),
        }
    }

    /// Binds every tensor as a constant, for evaluation passes.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Bindings<'t> {
        Bindings {
            vars: self
                .entries
                .iter()
                .map(|e| tape.leaf(&e.tensor.clone().with_requires_grad(false)))
                .collect(),
        }
    }

    /// Adds tape gradients into each non-frozen tensor's `grad` buffer.
    pub fn accumulate(&mut self, bindings: &Bindings<'_>, grads: &Gradients) {
        for (e, v) in self.entries.iter_mut().zip(&bindings.vars) {
            if !e.tensor.requires_grad {
                continue;
            }
            if let Some(g) = grads.get(*v) {
                e.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.grad = None);
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Overwrites values by name; shapes must match exactly.
    pub fn load_named<'a>(&mut self, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        for (name, t) in tensors {
            let id = self
                .find(name)
                .ok_or_else(|| TensorError::Format(format!("unknown tensor {name}")))?;
            let entry = &mut self.entries[id.0];
            if entry.tensor.shape() != t.shape() {
                return Err(TensorError::shape("load_named", entry.tensor.shape(), t.shape()));
            }
            entry.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
