use serde::{Deserialize, Serialize};

use super::DenseArray;
use crate::error::{shape_err, Result};

/// Index of a learnable array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: DenseArray,
}

/// Flat, ordered collection of every learnable array of a model.
///
/// Model components hold [`ParamId`]s into the store, which keeps optimizer
/// state, gradients and checkpoints aligned by index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseArray) -> ParamId {
        self.params.push(NamedParam { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &DenseArray {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces the value of `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: DenseArray) -> Result<()> {
        let cur = &mut self.params[id.0];
        if cur.value.shape() != value.shape() {
            return shape_err(format!(
                "parameter {} has shape {:?}, got {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            ));
        }
        cur.value = value;
        Ok(())
    }
}
