//! AdamW with decoupled weight decay, cosine learning-rate annealing and norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `lr(e) = lr_min + (lr_init - lr_min) (1 + cos(pi e / E)) / 2` for fractional epoch `e`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_init: f64,
    pub lr_min: f64,
    pub epochs: usize,
}

impl CosineSchedule {
    pub fn lr(&self, epoch: f64) -> f64 {
        let e = epoch.clamp(0.0, self.epochs as f64);
        self.lr_min + 0.5 * (self.lr_init - self.lr_min) * (1.0 + (std::f64::consts::PI * e / self.epochs as f64).cos())
    }
}

/// Scales the gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm().f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (tb1, tb2, teps) = (T::of(b1), T::of(b2), T::of(self.eps));
        let step_size = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.no_decay { T::one() } else { T::of(1.0 - lr * self.weight_decay) };
            let (pd, gd) = (p.tensor.data_mut(), g.data());
            for i in 0..pd.len() {
                let md = &mut m.data_mut()[i];
                *md = tb1 * *md + (T::one() - tb1) * gd[i];
                let vd = &mut v.data_mut()[i];
                *vd = tb2 * *vd + (T::one() - tb2) * gd[i] * gd[i];
                pd[i] = pd[i] * decay - step_size * *md / ((*vd * inv_c2).sqrt() + teps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = CosineSchedule { lr_init: 1e-3, lr_min: 1e-5, epochs: 100 };
        assert_eq!(s.lr(0.0), 1e-3);
        assert!((s.lr(100.0) - 1e-5).abs() < 1e-18);
        assert!((s.lr(50.0) - (1e-3 + 1e-5) / 2.0).abs() < 1e-9);
        assert!(s.lr(30.0) > s.lr(31.0));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::new([2], vec![3.0f64, 0.0]), Tensor::new([1], vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let mut small = vec![Tensor::new([1], vec![0.5f64])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].item(), 0.5);
    }

    #[test]
    fn first_step_moves_by_lr_and_decay_is_decoupled() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new([2], vec![1.0, -1.0]), false);
        store.add("b", Tensor::new([1], vec![1.0]), true);
        let mut opt = AdamW::new(&store, 0.1);
        let grads = vec![Tensor::new([2], vec![2.0, -0.5]), Tensor::new([1], vec![0.0])];
        opt.step(&mut store, &grads, 0.01).unwrap();
        let w = store.iter().next().unwrap().tensor.data().to_vec();
        // bias-corrected first step is lr * sign(g) (up to eps), after shrinking by 1 - lr * wd
        assert!((w[0] - (1.0 * 0.999 - 0.01)).abs() < 1e-8);
        assert!((w[1] - (-1.0 * 0.999 + 0.01)).abs() < 1e-8);
        assert_eq!(store.iter().nth(1).unwrap().tensor.item(), 1.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::new([3], vec![2.0, -3.0, 0.5]), true);
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            let g = store.iter().next().unwrap().tensor.map(|v| 2.0 * (v - 0.25));
            opt.step(&mut store, &[g], 0.01).unwrap();
        }
        assert!(store.iter().next().unwrap().tensor.data().iter().all(|v| (v - 0.25).abs() < 1e-3));
    }
}
