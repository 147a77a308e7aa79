//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Moves every tensor of `other` into `self`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Order-sensitive hash over names and bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in &self.tensors {
            for b in name.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= t.checksum();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    /// Gradients naming parameters absent from `store` are an error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            p.expect_same_shape(g)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gv;
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_lr_is_noop() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let before = store.clone();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[2], vec![0.3, 0.1]).unwrap());
        opt.step(&mut store, &g).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        let mut g = BTreeMap::new();
        g.insert(
            "w".to_string(),
            Tensor::new(&[2], vec![5.0, -0.01]).unwrap(),
        );
        opt.step(&mut store, &g).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-4);
    }

    #[test]
    fn unknown_gradient_name_is_error() {
        let mut store = ParamStore::new();
        let mut opt = Adam::new(AdamConfig::default());
        let mut g = BTreeMap::new();
        g.insert("nope".to_string(), Tensor::zeros(&[1]));
        assert!(opt.step(&mut store, &g).is_err());
    }
}
