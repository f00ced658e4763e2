//! Decoupled-weight-decay Adam.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0) }
    }
}

pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &[Tensor<T>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { cfg, m: zeros.clone(), v: zeros, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update; returns the pre-clipping global gradient norm.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> f64 {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        let norm = grads.iter().flat_map(|g| g.data()).map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one, clip) = (T::one(), T::from_f64_lossy(clip));
        let step = T::from_f64_lossy(c.lr / bc1);
        let decay = T::from_f64_lossy(1.0 - c.lr * c.weight_decay);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gv = gv * clip;
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv = *pv * decay - step * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::<f64>::new(vec![2], vec![3.0, -2.0]).unwrap()];
        let mut opt = AdamW::new(AdamWConfig { lr: 0.05, clip_norm: None, ..Default::default() }, &p);
        for _ in 0..2000 {
            let g = vec![p[0].map(|v| 2.0 * v)];
            opt.step(&mut p, &g);
        }
        assert!(p[0].data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(opt.steps(), 2000);
    }
}
