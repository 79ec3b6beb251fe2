use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    pub fn new(hyper: AdamHyper, store: &ParamStore<f32>) -> Self {
        Self { hyper, step: 0, m: store.zeros_like(), v: store.zeros_like() }
    }

    /// Apply one update from `grads`, aligned with the store.
    pub fn apply(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>]) {
        assert_eq!(grads.len(), store.len(), "gradient buffer size");
        self.step += 1;
        let AdamHyper { lr, beta1, beta2, eps } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let mn = beta1 * *m as f64 + (1.0 - beta1) * g;
                let vn = beta2 * *v as f64 + (1.0 - beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let upd = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *w = (*w as f64 - upd) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[3], vec![1.0f32, 1.0, 1.0]));
        let mut opt = Adam::new(AdamHyper::with_lr(0.1), &store);
        opt.apply(&mut store, &[Tensor::new(&[3], vec![2.0, -0.5, 0.0])]);
        let w = store.by_name("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![3.0f32, -2.0]));
        let mut opt = Adam::new(AdamHyper::with_lr(0.05), &store);
        for _ in 0..500 {
            let g: Vec<f32> = store.by_name("w").unwrap().data().iter().map(|&w| 2.0 * (w - 0.5)).collect();
            opt.apply(&mut store, &[Tensor::new(&[2], g)]);
        }
        for &w in store.by_name("w").unwrap().data() {
            assert!((w - 0.5).abs() < 1e-2);
        }
    }
}
