use std::collections::BTreeMap;

use super::params::{Gradients, ParamStore};
use super::tensor::Tensor;

/// Cosine-decayed step size without warmup: `base` at step 0, 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// First-order adaptive-moment optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, &gv), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                *v = self.momentum * *v + gv;
                *pv -= lr * *v;
            }
        }
    }
}
