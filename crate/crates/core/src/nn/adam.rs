//! Adam over a flat list of parameter tensors.

use super::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn lr(&self) -> f32 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    /// One update. `grads[i]` of `None` means "no gradient this step" and the
    /// parameter (and its moments) are left untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = match grads[i] {
                Some(g) => g,
                None => continue,
            };
            assert!(p.same_shape(g), "gradient shape mismatch at param {i}");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..p.data.len() {
                let gv = g.data[k];
                m.data[k] = self.cfg.beta1 * m.data[k] + (1.0 - self.cfg.beta1) * gv;
                v.data[k] = self.cfg.beta2 * v.data[k] + (1.0 - self.cfg.beta2) * gv * gv;
                let mhat = m.data[k] / b1t;
                let vhat = v.data[k] / b2t;
                p.data[k] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}
