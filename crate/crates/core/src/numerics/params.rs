use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub type ParamId = usize;

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    tensor: Tensor,
    frozen: bool,
}

/// Named learnable tensors. The group of a parameter is the first
/// dot-separated segment of its name (`cvgf.0.intra.wq` is in `cvgf`).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            tensor,
            frozen: false,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> std::ops::Range<ParamId> {
        0..self.entries.len()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn group(&self, id: ParamId) -> &str {
        group_of(&self.entries[id].name)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.entries[id].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id].frozen = frozen;
    }

    /// Freezes exactly the parameters whose group is in `groups`; all others
    /// become trainable.
    pub fn freeze_groups(&mut self, groups: &[&str]) {
        for e in &mut self.entries {
            e.frozen = groups.contains(&group_of(&e.name));
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// SHA-256 over the names and value bits of every parameter in `group`.
    pub fn group_digest(&self, group: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| group_of(&e.name) == group) {
            h.update(e.name.as_bytes());
            for v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks parameter {}", e.name)))?;
            if src.tensor.shape() != e.tensor.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    e.name,
                    src.tensor.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor = src.tensor.clone();
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}
