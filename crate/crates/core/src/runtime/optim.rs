//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One bias-corrected AdamW update of a flat parameter slice at step `t ≥ 1`:
/// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`. Arithmetic runs in 64-bit.
pub fn adamw_update(theta: &mut [f32], grad: &[f32], m: &mut [f64], v: &mut [f64], t: u64, p: &AdamWParams) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - p.beta1.powi(t as i32);
    let bc2 = 1.0 - p.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i] as f64;
        m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g;
        v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g * g;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        let th = theta[i] as f64;
        theta[i] = (th - p.lr * mh / (vh.sqrt() + p.eps) - p.lr * p.weight_decay * th) as f32;
    }
}

/// Optimizer state for every trainable entry of one store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub params: AdamWParams,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: AdamWParams, store: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; if e.kind == ParamKind::Weight { e.value.len() } else { 0 }]).collect();
        AdamW { params, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies the stored gradients. A weight without a gradient buffer is
    /// treated as having zero gradient, so decay still applies. Any
    /// non-finite gradient aborts the step before anything changes.
    pub fn step(&mut self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::config(format!("optimizer built for {} tensors, store has {}", self.m.len(), store.len())));
        }
        for e in store.entries() {
            if let Some(g) = e.value.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {} at element {i} is {}", e.name, g[i])));
                }
            }
        }
        self.t += 1;
        for (k, e) in store.entries_mut().iter_mut().enumerate() {
            if e.kind != ParamKind::Weight {
                continue;
            }
            let grad = e.value.take_grad().unwrap_or_else(|| vec![0.0; e.value.len()]);
            adamw_update(e.value.data_mut(), &grad, &mut self.m[k], &mut self.v[k], self.t, &self.params);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;
    use rand::{Rng, SeedableRng};

    fn p(lr: f64, wd: f64) -> AdamWParams {
        AdamWParams { lr, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: wd }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut th = vec![0.3f32, -1.5, 2.0];
        let before = th.clone();
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        for t in 1..5 {
            adamw_update(&mut th, &[0.0; 3], &mut m, &mut v, t, &p(1e-2, 0.0));
        }
        assert_eq!(th, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut th = vec![1.0f32, 1.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut th, &[3.0, -0.5], &mut m, &mut v, 1, &p(1e-3, 0.0));
        assert!((th[0] as f64 - (1.0 - 1e-3 * 3.0 / (3.0 + 1e-8))).abs() < 1e-7);
        assert!((th[1] as f64 - (1.0 + 1e-3)).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_example() {
        let mut th = vec![1.0f32];
        adamw_update(&mut th, &[0.0], &mut [0.0], &mut [0.0], 1, &p(1e-4, 0.01));
        assert_eq!(th[0], 0.999999f32);
    }

    /// Textbook update in 64-bit, written out step by step.
    fn reference(theta: &[f64], grads: &[Vec<f64>], p: &AdamWParams) -> Vec<f64> {
        let mut th = theta.to_vec();
        let mut m = vec![0.0; th.len()];
        let mut v = vec![0.0; th.len()];
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as f64;
            for i in 0..th.len() {
                m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
                v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i].powi(2);
                let mh = m[i] / (1.0 - p.beta1.powf(t));
                let vh = v[i] / (1.0 - p.beta2.powf(t));
                th[i] -= p.lr * (mh / (vh.sqrt() + p.eps)) + p.lr * p.weight_decay * th[i];
            }
        }
        th
    }

    #[test]
    fn matches_reference_on_random_inputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 16;
            let theta: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let grads: Vec<Vec<f32>> = (0..5).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let params = AdamWParams { lr: 1e-3, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.01 };
            let mut th = theta.clone();
            let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
            for (k, g) in grads.iter().enumerate() {
                adamw_update(&mut th, g, &mut m, &mut v, k as u64 + 1, &params);
            }
            // The reference sees the f32-rounded iterates the optimizer stores.
            let mut want = theta.iter().map(|&x| x as f64).collect::<Vec<_>>();
            let g64: Vec<Vec<f64>> = grads.iter().map(|g| g.iter().map(|&x| x as f64).collect()).collect();
            want = reference(&want, &g64, &params);
            for (a, b) in th.iter().zip(&want) {
                let rel = (*a as f64 - b).abs() / b.abs().max(1e-3);
                assert!(rel <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor4::full([1, 1, 1, 2], 1.0f32), ParamKind::Weight);
        store.get_mut(id).set_grad(vec![0.1, f32::NAN]).unwrap();
        let mut opt = AdamW::new(p(1e-3, 0.0), &store);
        let err = opt.step(&mut store).unwrap_err().to_string();
        assert!(err.contains('w') && err.contains("NaN"), "{err}");
        assert_eq!(store.get(id).data(), &[1.0, 1.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn running_stats_untouched() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor4::full([1, 1, 1, 1], 1.0f32), ParamKind::Weight);
        let r = store.insert("bn.mean", Tensor4::full([1, 1, 1, 1], 0.5f32), ParamKind::RunningStat);
        store.get_mut(w).set_grad(vec![1.0]).unwrap();
        let mut opt = AdamW::new(p(0.1, 0.01), &store);
        opt.step(&mut store).unwrap();
        assert!(store.get(w).data()[0] < 1.0);
        assert_eq!(store.get(r).data()[0], 0.5);
        assert!(store.get(w).grad().is_none());
    }
}
