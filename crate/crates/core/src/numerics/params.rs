use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Named learnable tensors, iterated in lexicographic path order.
///
/// A path's shape is fixed by its first insertion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) -> Result<()> {
        let path = path.into();
        if self.tensors.contains_key(&path) {
            return Err(Error::Integrity(format!("duplicate parameter path `{path}`")));
        }
        self.tensors.insert(path, tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter path `{path}`")))
    }

    /// Replace a tensor; its shape must not change.
    pub fn set(&mut self, path: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(path)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter path `{path}`")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Integrity(format!(
                "parameter `{path}` has shape {}, refusing {}",
                slot.shape_str(),
                tensor.shape_str()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copy with a single coordinate shifted by `delta`.
    pub fn perturbed(&self, path: &str, index: usize, delta: f64) -> Result<ParamStore> {
        let mut out = self.clone();
        let t = out
            .get_mut(path)
            .ok_or_else(|| Error::Integrity(format!("unknown parameter path `{path}`")))?;
        let slot = t
            .data_mut()
            .get_mut(index)
            .ok_or_else(|| Error::Integrity(format!("index {index} out of range for `{path}`")))?;
        *slot += delta;
        Ok(out)
    }
}

/// Gradients keyed by parameter path; shape mirrors the [`ParamStore`] they came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    tensors: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            tensors: params
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.tensors.get(path)
    }

    pub(crate) fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            for x in t.data_mut() {
                *x *= factor;
            }
        }
    }

    /// Scale one path's gradient; used to build negative controls for the gradient checker.
    pub fn scale_path(&mut self, path: &str, factor: f64) {
        if let Some(t) = self.tensors.get_mut(path) {
            for x in t.data_mut() {
                *x *= factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_are_unique_and_shapes_fixed() {
        let mut p = ParamStore::new();
        p.insert("b", Tensor::zeros(1, 2)).unwrap();
        p.insert("a", Tensor::zeros(2, 2)).unwrap();
        assert!(p.insert("a", Tensor::zeros(2, 2)).is_err());
        assert!(p.set("a", Tensor::zeros(1, 4)).is_err());
        p.set("a", Tensor::identity(2)).unwrap();
        assert_eq!(p.paths().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(p.num_scalars(), 6);
    }
}
