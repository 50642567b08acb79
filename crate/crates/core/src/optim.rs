//! Decoupled-weight-decay Adam with a cosine learning-rate schedule.

use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
    pub weight_decay: Scalar,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Half-cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: Scalar, step: usize, total: usize) -> Scalar {
    if total == 0 {
        return base;
    }
    let p = (step.min(total) as Scalar) / total as Scalar;
    0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Only matrices (and prompt banks) decay; biases, norms, `A_log`, `D` don't.
fn decays(name: &str, value: &Tensor) -> bool {
    value.ndim() >= 2 && !name.ends_with("a_log")
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Option<Vec<Scalar>>>,
    v: Vec<Option<Vec<Scalar>>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        Self { cfg, step: 0, m: vec![None; store.len()], v: vec![None; store.len()] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient (frozen) are left untouched, weight decay included.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: Scalar) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((id, p), g) in store.iter_mut().zip(grads) {
            let (Some(g), true) = (g, p.trainable) else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let wd = if decays(&p.name, &p.value) { c.weight_decay } else { 0.0 };
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= lr * (mh / (vh.sqrt() + c.eps) + wd * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-12);
    }

    #[test]
    fn minimises_quadratic_and_skips_frozen() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::new(&[1], vec![3.0]).unwrap());
        let b = s.add("b", Tensor::new(&[1], vec![3.0]).unwrap());
        s.set_trainable(|n| n == "a");
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() }, &s);
        for _ in 0..300 {
            let x = s.get(a).item();
            let grads = vec![Some(Tensor::scalar(2.0 * x)), None];
            opt.update(&mut s, &grads, 0.1);
        }
        assert!(s.get(a).item().abs() < 1e-2);
        assert_eq!(s.get(b).item(), 3.0);
    }
}
