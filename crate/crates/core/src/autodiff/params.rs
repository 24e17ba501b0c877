use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub(crate) first_moment: Tensor,
    pub(crate) second_moment: Tensor,
    pub(crate) step: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Param {
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        value.ensure_finite("param insert")?;
        if self.params.contains_key(&name) {
            return Err(Error::invalid("param insert", format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch { op: "param set", lhs: p.value.shape().to_vec(), rhs: value.shape().to_vec() });
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Frozen stores enter graphs as constants and reject gradients.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenGradient(name.to_string()));
        }
        let p = self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if p.grad.shape() != grad.shape() {
            return Err(Error::ShapeMismatch { op: "accumulate_grad", lhs: p.grad.shape().to_vec(), rhs: grad.shape().to_vec() });
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Drop gradients and Adam moments, keeping the values.
    pub fn reset_optimizer(&mut self) {
        for p in self.params.values_mut() {
            *p = Param::new(std::mem::replace(&mut p.value, Tensor::scalar(0.0)));
        }
    }

    /// Hex SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn iteration_is_sorted() {
        let mut s = ParamStore::new();
        for n in ["c", "a", "b"] {
            s.insert(n, Tensor::scalar(0.0)).unwrap();
        }
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a", "b", "c"]);
    }

    #[test]
    fn frozen_store_rejects_gradient() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        s.freeze();
        assert!(matches!(s.accumulate_grad("w", &Tensor::scalar(1.0)), Err(Error::FrozenGradient(_))));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let before = s.fingerprint();
        s.set("w", Tensor::vector(vec![1.0, 2.5])).unwrap();
        assert_ne!(before, s.fingerprint());
    }
}
