//! Named, ordered collections of tensors.

use std::collections::btree_map;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Ordered map from parameter name to tensor, plus free-form string metadata.
///
/// Iteration is in lexicographic (byte) order of names on every platform.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

/// Names and shapes of a [`ParamSet`], in iteration order.
pub type Schema = Vec<(String, Vec<usize>)>;

pub fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_control) {
        return Err(Error::InvalidName(name.to_string()));
    }
    Ok(())
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace a tensor.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Builder-style insert.
    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Result<Self> {
        self.insert(name, tensor)?;
        Ok(self)
    }

    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Tensor)>,
        S: Into<String>,
    {
        let mut set = Self::new();
        for (name, tensor) in entries {
            set.insert(name, tensor)?;
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Total number of scalar elements across all tensors.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn schema(&self) -> Schema {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    /// Same schema, every element zero, no metadata.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().all(Tensor::is_zero)
    }

    /// Apply a fallible per-tensor transform, keeping names and metadata.
    pub fn try_map(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (name, t) in &self.entries {
            entries.insert(name.clone(), f(name, t)?);
        }
        Ok(Self {
            entries,
            metadata: self.metadata.clone(),
        })
    }

    /// Concatenate every tensor's data in name order into one vector.
    pub fn flatten_concat(&self) -> Result<Tensor> {
        if self.entries.is_empty() {
            return Err(Error::EmptyParamSet);
        }
        let mut flat = Vec::with_capacity(self.num_elements());
        for t in self.entries.values() {
            flat.extend_from_slice(t.data());
        }
        Tensor::vector(flat)
    }

    /// Inverse of [`flatten_concat`](Self::flatten_concat) for a given schema.
    pub fn unflatten(schema: &[(String, Vec<usize>)], flat: &[f64]) -> Result<Self> {
        let total: usize = schema.iter().map(|(_, s)| numel(s)).sum();
        if total != flat.len() {
            return Err(Error::shape("unflatten", &[total], &[flat.len()]));
        }
        let mut set = Self::new();
        let mut offset = 0;
        for (name, shape) in schema {
            let n = numel(shape);
            set.insert(
                name.clone(),
                Tensor::new(shape.clone(), flat[offset..offset + n].to_vec())?,
            )?;
            offset += n;
        }
        Ok(set)
    }

    /// Sum of absolute values of every element.
    pub fn l1_norm(&self) -> f64 {
        self.entries.values().map(Tensor::l1_norm).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = btree_map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}
