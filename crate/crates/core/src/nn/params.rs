use crate::error::{Error, Result};
use crate::nn::tensor::Tensor2;

/// Named trainable tensors, addressed by insertion index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor2 {
        &self.values[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor2 {
        &mut self.values[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor2] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor2] {
        &mut self.values
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor2::len).sum()
    }

    /// Zero tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor2> {
        self.values.iter().map(|v| Tensor2::zeros(v.rows, v.cols)).collect()
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter names differ".into()));
        }
        for (i, (dst, src)) in self.values.iter_mut().zip(&other.values).enumerate() {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    other.names[i],
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}
