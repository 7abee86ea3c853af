//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state: step count and first/second moments keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient. Returns the squared
    /// L2 norm of each tensor's change.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<BTreeMap<String, f64>> {
        self.step += 1;
        let c = self.cfg;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = c.lr as f32;
        let decay = 1.0 - (c.lr * c.weight_decay) as f32;
        let (bc1, bc2, eps) = (bc1 as f32, bc2 as f32, c.eps as f32);
        let mut deltas = BTreeMap::new();
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != grad.shape() {
                return Err(Error::invalid(format!("gradient shape mismatch for `{name}`")));
            }
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut sq = 0.0f64;
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                let old = *w;
                *w = *w * decay - lr * update;
                sq += ((*w - old) as f64).powi(2);
            }
            deltas.insert(name.clone(), sq);
        }
        Ok(deltas)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_decoupled_step() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..Default::default()
        });
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get("w").unwrap().data()[0] - 0.89).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_bits_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![0.3, -2.5, 1e-7]));
        let before = store.clone();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..Default::default()
        });
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![1.0, -3.0, 0.5]))]);
        let d = opt.step(&mut store, &grads).unwrap();
        assert_eq!(store, before);
        assert_eq!(d["w"], 0.0);
    }

    #[test]
    fn unknown_gradient_is_rejected() {
        let mut store = ParamStore::new();
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = BTreeMap::from([("nope".to_string(), Tensor::scalar(1.0))]);
        assert!(opt.step(&mut store, &grads).is_err());
    }
}
