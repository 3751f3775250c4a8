//! Batch normalization over `(n, h, w)` per channel.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Affine parameters and running statistics of one normalization layer.
#[derive(Clone, Debug)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::lit(BN_EPS),
            momentum: T::lit(BN_MOMENTUM),
        }
    }
}

/// Per-channel statistics saved by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check<T: Scalar>(x: &Tensor4<T>, gamma: &[T], beta: &[T]) -> Result<()> {
    let c = x.shape().c;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("{} parameter channels vs input {}", gamma.len(), x.shape()),
        ));
    }
    Ok(())
}

/// Normalizes with the batch's own statistics.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor4<T>, BatchStats<T>)> {
    check(x, gamma, beta)?;
    let s = x.shape();
    let count = T::from_usize(s.n * s.plane()).unwrap();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc += x.plane(n, c).iter().copied().sum();
        }
        let m = acc / count;
        let mut sq = T::zero();
        for n in 0..s.n {
            for &v in x.plane(n, c) {
                let d = v - m;
                sq += d * d;
            }
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = x.clone();
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] * inv_std[c];
            let shift = beta[c] - mean[c] * scale;
            let st = y.index(n, c, 0, 0);
            for v in &mut y.data_mut()[st..st + p] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok((y, BatchStats { mean, var, inv_std }))
}

/// Normalizes with stored running statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor4<T>> {
    check(x, gamma, beta)?;
    let s = x.shape();
    let mut y = x.clone();
    let p = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] / (running_var[c] + eps).sqrt();
            let shift = beta[c] - running_mean[c] * scale;
            let st = y.index(n, c, 0, 0);
            for v in &mut y.data_mut()[st..st + p] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Folds a batch's statistics into running estimates. The running variance
/// tracks the unbiased estimator.
pub fn update_running<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    stats: &BatchStats<T>,
    count: usize,
    momentum: T,
) {
    let unbias = if count > 1 {
        T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
    } else {
        T::one()
    };
    for c in 0..running_mean.len() {
        running_mean[c] = (T::one() - momentum) * running_mean[c] + momentum * stats.mean[c];
        running_var[c] = (T::one() - momentum) * running_var[c] + momentum * stats.var[c] * unbias;
    }
}

/// Gradients of the training-mode forward: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    stats: &BatchStats<T>,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let p = s.plane();
    let m = T::from_usize(s.n * p).unwrap();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let (mu, is) = (stats.mean[c], stats.inv_std[c]);
        for n in 0..s.n {
            for (&g, &v) in dy.plane(n, c).iter().zip(x.plane(n, c)) {
                dbeta[c] += g;
                dgamma[c] += g * (v - mu) * is;
            }
        }
    }
    let mut dx = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, is) = (stats.mean[c], stats.inv_std[c]);
            let k = gamma[c] * is / m;
            let st = dx.index(n, c, 0, 0);
            let out = &mut dx.data_mut()[st..st + p];
            for ((o, &g), &v) in out.iter_mut().zip(dy.plane(n, c)).zip(x.plane(n, c)) {
                let xhat = (v - mu) * is;
                *o = k * (m * g - dbeta[c] - xhat * dgamma[c]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Gradients of the eval-mode forward: `(dx, dgamma, dbeta)`.
pub fn batch_norm_eval_backward<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let p = s.plane();
    let mut dx = Tensor4::zeros(s);
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let is = T::one() / (running_var[c] + eps).sqrt();
            let st = dx.index(n, c, 0, 0);
            let out = &mut dx.data_mut()[st..st + p];
            for ((o, &g), &v) in out.iter_mut().zip(dy.plane(n, c)).zip(x.plane(n, c)) {
                *o = g * gamma[c] * is;
                dbeta[c] += g;
                dgamma[c] += g * (v - running_mean[c]) * is;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Standalone batch normalization that updates running statistics in train mode.
pub fn batch_norm<T: Scalar>(x: &Tensor4<T>, p: &mut BatchNormParams<T>, mode: Mode) -> Result<Tensor4<T>> {
    match mode {
        Mode::Train => {
            let (y, stats) = batch_norm_train(x, &p.gamma, &p.beta, p.eps)?;
            let s = x.shape();
            update_running(&mut p.running_mean, &mut p.running_var, &stats, s.n * s.plane(), p.momentum);
            Ok(y)
        }
        Mode::Eval => batch_norm_eval(x, &p.gamma, &p.beta, &p.running_mean, &p.running_var, p.eps),
    }
}
