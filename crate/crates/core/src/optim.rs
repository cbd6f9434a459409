//! Adam optimizer with classic L2 weight decay.
//!
//! Decay is folded into the gradient before the moment updates
//! (`g += weight_decay * param`), not decoupled.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Moment buffers are laid out to match `store`'s parameter order.
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, e)| vec![0.0; e.value.numel()]).collect();
        let v = store.iter().map(|(_, e)| vec![0.0; e.value.numel()]).collect();
        Adam { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update over every parameter in `store`, consuming
    /// the accumulated gradients (which are left untouched; call
    /// [`ParamStore::zero_grads`] afterwards).
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);

        for idx in 0..store.len() {
            let id = crate::params::ParamId(idx);
            let grad = store.grad(id).to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let value = store.value_mut(id).data_mut();
            for i in 0..value.len() {
                let g = grad[i] + weight_decay * value[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: Vec<f64>) -> (ParamStore, crate::params::ParamId) {
        let mut store = ParamStore::new();
        let n = value.len();
        let id = store.add("w", Tensor::new(vec![n], value).unwrap()).unwrap();
        (store, id)
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (mut store, id) = store_with(vec![1.0, -2.0]);
        store.accumulate_grad(id, &[5.0, -5.0]);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store);
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let (mut store, id) = store_with(vec![0.0, 0.0]);
        store.accumulate_grad(id, &[3.0, -0.5]);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        adam.step(&mut store);
        assert!(store.value(id).data()[0] < 0.0);
        assert!(store.value(id).data()[1] > 0.0);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w - 3)^2, gradient 2(w - 3); 200 steps at lr 0.1.
        let (mut store, id) = store_with(vec![0.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        for _ in 0..200 {
            let w = store.value(id).data()[0];
            store.zero_grads();
            store.accumulate_grad(id, &[2.0 * (w - 3.0)]);
            adam.step(&mut store);
        }
        let w = store.value(id).data()[0];
        assert!((w - 3.0).abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn weight_decay_shrinks_params_without_task_gradient() {
        let (mut store, id) = store_with(vec![4.0]);
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        for _ in 0..50 {
            store.zero_grads();
            adam.step(&mut store);
        }
        let w = store.value(id).data()[0];
        assert!(w < 4.0 && w > 0.0, "w = {w}");
    }
}
