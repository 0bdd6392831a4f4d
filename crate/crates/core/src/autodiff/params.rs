use indexmap::IndexMap;

use super::Shape;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Shape,
    pub data: Vec<f64>,
}

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    entries: IndexMap<String, Param>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: Shape, data: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        if data.len() != shape.numel() {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` has {} values for shape {shape}",
                data.len()
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let (idx, _) = self.entries.insert_full(name, Param { shape, data });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).expect("param id out of range")
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, p))| (ParamId(i), k.as_str(), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }
}

/// Gradient buffers keyed by [`ParamId`], allocated on first write.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(buf) => {
                for (b, g) in buf.iter_mut().zip(grad) {
                    *b += g;
                }
            }
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    /// Adds every buffer of `other` into `self`.
    pub fn merge(&mut self, other: &GradStore) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
