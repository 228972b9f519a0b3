use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Hyperparameters of one Adam update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Adds `l1 * sign(w)` to the gradient.
    pub weight_decay_l1: f64,
    /// Adds `2 * l2 * w` to the gradient.
    pub weight_decay_l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay_l1: 0.0, weight_decay_l2: 0.0 }
    }
}

#[derive(Clone)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
    /// Buffers such as batch-norm running statistics are stored but never optimized.
    pub trainable: bool,
}

/// Named learnable parameters plus their optimizer state, in insertion order.
#[derive(Clone, Default)]
pub struct ParamStore<T = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    fn insert_entry(&mut self, name: &str, data: Vec<T>, shape: &[usize], trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::arg(format!("duplicate parameter name `{name}`")));
        }
        let value = if trainable { Tensor::param(data, shape)? } else { Tensor::from_vec(data, shape)? };
        let n = value.numel();
        self.entries.insert(
            name.to_string(),
            ParamEntry { value, first_moment: vec![T::zero(); n], second_moment: vec![T::zero(); n], step: 0, trainable },
        );
        Ok(())
    }

    pub fn insert(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> Result<()> {
        self.insert_entry(name, data, shape, true)
    }

    pub fn insert_buffer(&mut self, name: &str, data: Vec<T>, shape: &[usize]) -> Result<()> {
        self.insert_entry(name, data, shape, false)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces the value of an existing entry, keeping its optimizer state.
    pub fn set(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let entry = self.entries.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let shape = entry.value.shape().to_vec();
        entry.value = if entry.trainable { Tensor::param(data, &shape)? } else { Tensor::from_vec(data, &shape)? };
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.entries.values().for_each(|e| e.value.zero_grad());
    }

    /// Bias-corrected Adam update of every trainable entry, consuming the
    /// gradients accumulated on the current leaves.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for (name, entry) in &self.entries {
            if entry.trainable && entry.value.grad().is_none() {
                return Err(Error::MissingGradient(name.clone()));
            }
        }
        let c = |v: f64| T::from_f64_lossy(v);
        let (b1, b2, eps, lr) = (c(cfg.beta1), c(cfg.beta2), c(cfg.eps), c(cfg.lr));
        let (l1, l2) = (c(cfg.weight_decay_l1), c(cfg.weight_decay_l2));
        let two = T::one() + T::one();
        for entry in self.entries.values_mut().filter(|e| e.trainable) {
            let grad = entry.value.grad().expect("checked above");
            entry.step += 1;
            let t = entry.step as i32;
            let bc1 = c(1.0 - cfg.beta1.powi(t));
            let bc2 = c(1.0 - cfg.beta2.powi(t));
            let mut w = entry.value.to_vec();
            for i in 0..w.len() {
                let sign = if w[i] > T::zero() {
                    T::one()
                } else if w[i] < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                let g = grad[i] + l1 * sign + two * l2 * w[i];
                entry.first_moment[i] = b1 * entry.first_moment[i] + (T::one() - b1) * g;
                entry.second_moment[i] = b2 * entry.second_moment[i] + (T::one() - b2) * g * g;
                let m_hat = entry.first_moment[i] / bc1;
                let v_hat = entry.second_moment[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            let shape = entry.value.shape().to_vec();
            entry.value = Tensor::param(w, &shape)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", vec![w], &[1]).unwrap();
        s
    }

    fn set_grad(s: &ParamStore<f64>, g: f64) {
        let w = s.get("w").unwrap();
        w.scale(g).unwrap().sum().unwrap().backward().unwrap();
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store_with(1.0);
        assert!(s.insert("w", vec![0.0], &[1]).is_err());
        assert!(matches!(s.get("missing"), Err(Error::UnknownParameter(_))));
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with(0.7);
        set_grad(&s, 0.0);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store_with(1.0);
        set_grad(&s, 1.0);
        s.adam_step(&AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 0.9).abs() < 1e-7);
        assert!(s.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store_with(1.0);
        assert!(matches!(s.adam_step(&AdamConfig::default()), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn l1_decay_shrinks_weight_monotonically() {
        let mut s = store_with(1.0);
        let cfg = AdamConfig { lr: 0.01, weight_decay_l1: 1e-3, ..Default::default() };
        let mut prev = 1.0;
        for _ in 0..50 {
            set_grad(&s, 0.0);
            s.adam_step(&cfg).unwrap();
            let w = s.get("w").unwrap().data()[0];
            assert!(w < prev && w > 0.0);
            prev = w;
        }
    }

    #[test]
    fn buffers_are_not_optimized() {
        let mut s = store_with(1.0);
        s.insert_buffer("running", vec![3.0], &[1]).unwrap();
        set_grad(&s, 1.0);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.get("running").unwrap().data()[0], 3.0);
        assert_eq!(s.num_parameters(), 1);
    }
}
