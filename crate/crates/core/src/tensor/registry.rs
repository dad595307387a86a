use super::{Result, Tensor, TensorError};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters in lexicographic order, each flagged trainable or frozen.
///
/// Frozen parameters are stored as non-differentiable leaves, so backward
/// never allocates gradient buffers for them.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    params: BTreeMap<String, Param>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let tensor = Tensor::leaf(shape, data, trainable)?;
        self.params.insert(name.to_string(), Param { tensor, trainable });
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Result<Param> {
        self.params.remove(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).map(|p| &p.tensor).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.param(name).map(|p| p.trainable)
    }

    /// Replaces a parameter's values. The new leaf starts without a gradient.
    pub fn set_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        p.tensor = Tensor::leaf(p.tensor.shape(), data, p.trainable)?;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        p.trainable = trainable;
        p.tensor = Tensor::leaf(p.tensor.shape(), p.tensor.data().to_vec(), trainable)?;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.to_string()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&self) {
        for p in self.params.values() {
            p.tensor.zero_grad();
        }
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_lexicographic() {
        let mut r = ParamRegistry::new();
        for name in ["b.w", "a.z", "a.b"] {
            r.insert(name, &[1], vec![0.0], true).unwrap();
        }
        assert_eq!(r.names().collect::<Vec<_>>(), ["a.b", "a.z", "b.w"]);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut r = ParamRegistry::new();
        r.insert("x", &[1], vec![0.0], true).unwrap();
        assert_eq!(r.insert("x", &[1], vec![1.0], false).unwrap_err(), TensorError::DuplicateParam("x".into()));
    }

    #[test]
    fn frozen_leaves_do_not_track_gradients() {
        let mut r = ParamRegistry::new();
        r.insert("frozen", &[1], vec![2.0], false).unwrap();
        r.insert("live", &[1], vec![3.0], true).unwrap();
        let loss = r.get("frozen").unwrap().mul(r.get("live").unwrap()).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert!(!r.get("frozen").unwrap().has_grad());
        assert_eq!(r.get("live").unwrap().grad(), Some(vec![2.0]));
    }
}
