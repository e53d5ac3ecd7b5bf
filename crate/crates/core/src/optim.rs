//! Adam with L2 weight decay, per-parameter learning-rate factors and
//! gradient masks applied between decay and the moment update.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::GradientMask;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    lr_factor: HashMap<ParamId, f64>,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
    steps: u64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            lr_factor: HashMap::new(),
            moments: HashMap::new(),
            steps: 0,
        }
    }

    pub fn set_lr_factor(&mut self, id: ParamId, factor: f64) {
        self.lr_factor.insert(id, factor);
    }

    pub fn lr_factor(&self, id: ParamId) -> f64 {
        self.lr_factor.get(&id).copied().unwrap_or(1.0)
    }

    /// Drops accumulated moments and the step counter.
    pub fn reset(&mut self) {
        self.moments.clear();
        self.steps = 0;
    }

    /// One update of every trainable parameter from its accumulated gradient.
    ///
    /// Weight decay is added to the gradient first, then `masks` zero their
    /// entries, so masked entries see a zero gradient and zero moments and
    /// are left bit-identical. Gradients are cleared afterwards.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], masks: &[GradientMask]) -> Result<()> {
        self.steps += 1;
        for store in stores.iter_mut() {
            self.decay(store);
        }
        for mask in masks {
            let mut found = false;
            for store in stores.iter_mut() {
                found |= store.apply_mask(mask)?;
            }
            if !found {
                return Err(Error::Compatibility(format!("mask names unknown parameter '{}'", mask.param)));
            }
        }
        for store in stores.iter_mut() {
            self.update(store);
        }
        Ok(())
    }

    fn decay(&self, store: &mut ParamStore) {
        if self.weight_decay == 0.0 {
            return;
        }
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.requires_grad() {
                continue;
            }
            let values = p.data().to_vec();
            if let Some(g) = p.grad_mut() {
                for (gi, vi) in g.iter_mut().zip(values) {
                    *gi += self.weight_decay * vi;
                }
            }
        }
    }

    fn update(&mut self, store: &mut ParamStore) {
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.get(id).requires_grad() {
                continue;
            }
            let lr = self.lr * self.lr_factor(id);
            let p = store.get_mut(id);
            let n = p.numel();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let values = p.data_mut();
            for j in 0..n {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                if m[j] == 0.0 {
                    continue;
                }
                values[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn masked_entries_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let mut opt = Adam::new(0.1, 0.01);
        for _ in 0..3 {
            store.get_mut(id).grad_mut().unwrap().copy_from_slice(&[1.0, 1.0, 1.0]);
            opt.step(&mut [&mut store], &[GradientMask::new("w", vec![1])]).unwrap();
        }
        let v = store.get(id).data();
        assert_eq!(v[1], 2.0);
        assert!(v[0] < 1.0 && v[2] < 3.0);
    }

    #[test]
    fn lr_factor_scales_first_step() {
        // The first Adam step moves each entry by lr·sign(g) (up to eps).
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![0.0]));
        let b = store.add("b", Tensor::vector(vec![0.0]));
        let mut opt = Adam::new(0.01, 0.0);
        opt.set_lr_factor(b, 0.1);
        store.get_mut(a).grad_mut().unwrap()[0] = 3.0;
        store.get_mut(b).grad_mut().unwrap()[0] = 3.0;
        opt.step(&mut [&mut store], &[]).unwrap();
        let da = store.get(a).data()[0];
        let db = store.get(b).data()[0];
        assert!((db / da - 0.1).abs() < 1e-9);
    }
}
