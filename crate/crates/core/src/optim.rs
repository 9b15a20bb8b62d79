//! Adam with optional decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters and parameters missing from
    /// `grads` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Matrix>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            let (m, v) =
                self.moments.entry(name.clone()).or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            let (b1, b2, lr, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.lr, self.cfg.eps, self.cfg.weight_decay);
            let w = p.value.as_mut_slice();
            for (((wi, gi), mi), vi) in w.iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *wi -= lr * (update + wd * *wi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Matrix::from_rows(&[[3.0, -2.0]]), true);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..500 {
            let x = store.value("x").unwrap().clone();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), x.scale(2.0));
            opt.step(&mut store, &grads);
        }
        assert!(store.value("x").unwrap().frobenius_norm() < 1e-2);
    }

    #[test]
    fn zero_lr_and_frozen_are_fixed_points() {
        let mut store = ParamStore::new();
        store.insert("a", Matrix::from_rows(&[[1.0]]), true);
        store.insert("b", Matrix::from_rows(&[[1.0]]), false);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Matrix::scalar(5.0));
        grads.insert("b".to_string(), Matrix::scalar(5.0));
        Adam::new(AdamConfig { lr: 0.0, ..Default::default() }).step(&mut store, &grads);
        assert_eq!(store.value("a").unwrap().item(), 1.0);
        Adam::new(AdamConfig::default()).step(&mut store, &grads);
        assert_eq!(store.value("b").unwrap().item(), 1.0);
    }
}
