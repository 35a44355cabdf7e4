//! Named parameter collections.

use super::Tensor;
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Ordered map from parameter id to tensor. Iteration is sorted by id, so
/// optimizer updates and checkpoint layouts are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    map: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    /// Inserts a parameter (marks it `requires_grad`). Ids must be unique.
    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::State(format!("parameter id {name:?} already exists")));
        }
        tensor.requires_grad = true;
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Sorted-by-id iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    /// Adds `grad` into the parameter's gradient buffer (allocating zeros
    /// first if the buffer is absent).
    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let t = self.get_mut(name)?;
        if grad.len() != t.numel() {
            return Err(Error::Dimension(format!(
                "gradient length {} != parameter {name:?} length {}",
                grad.len(),
                t.numel()
            )));
        }
        match &mut t.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(grad) {
                    *gi += ci;
                }
            }
            None => t.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for t in self.map.values_mut() {
            t.grad = None;
        }
    }

    /// Max absolute difference across all parameters of two sets with the
    /// same ids (used by the full-batch equivalence check).
    pub fn max_abs_diff(&self, other: &ParameterSet) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::State("parameter sets have different ids".into()));
        }
        let mut max = 0.0f64;
        for (name, t) in self.iter() {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name:?} shape mismatch"
                )));
            }
            for (a, b) in t.data().iter().zip(o.data()) {
                max = max.max((a - b).abs());
            }
        }
        Ok(max)
    }
}
