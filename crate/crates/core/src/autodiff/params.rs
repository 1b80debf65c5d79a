use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stable handle to a tensor owned by a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Owns every named tensor of a model. The trainable flag of a parameter is the
/// `requires_grad` bit of its tensor.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name {name}")));
        }
        tensor.set_requires_grad(trainable);
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.ids()
            .map(move |id| (id, self.names[id.0].as_str(), &self.tensors[id.0]))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.tensors[id.0].requires_grad()
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.tensors[id.0].set_requires_grad(on);
    }

    /// Freeze everything, then mark exactly `ids` trainable.
    pub fn set_trainable_exactly(&mut self, ids: &[ParamId]) {
        for t in &mut self.tensors {
            t.set_requires_grad(false);
        }
        for &id in ids {
            self.set_trainable(id, true);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_ids()
            .into_iter()
            .map(|id| self.get(id).numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Byte image of the given parameters, in the order given.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<Vec<u8>> {
        ids.iter().map(|&id| self.get(id).to_le_bytes()).collect()
    }

    /// Overwrite a parameter's values, keeping shape and trainable flag.
    pub fn assign(&mut self, id: ParamId, values: &Tensor) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.shape() != values.shape() {
            return Err(Error::dim("assign", t.shape(), values.shape()));
        }
        t.data_mut().copy_from_slice(values.data());
        Ok(())
    }
}
