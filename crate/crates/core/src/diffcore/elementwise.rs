//! Activations, tensor combination, dropout and channel softmax.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activate<T: Scalar>(x: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    match kind {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Gradient of an activation given its input `x` and output `y`.
pub fn activate_backward<T: Scalar>(x: &Tensor4<T>, y: &Tensor4<T>, dy: &Tensor4<T>, kind: Activation) -> Tensor4<T> {
    match kind {
        Activation::Relu => x.zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() }),
        Activation::Sigmoid => y.zip_map(dy, |s, g| g * s * (T::one() - s)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    ConcatChannels,
    Add,
    MulBroadcast,
}

/// Output shape of a channel concatenation, validating `n`, `h`, `w` agree.
pub fn concat_shape(shapes: &[Shape]) -> Result<Shape> {
    let first = *shapes.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
    let mut c = 0;
    for (i, s) in shapes.iter().enumerate() {
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::shape("concat", format!("input {i} has shape {s}, expected {}x*x{}x{}", first.n, first.h, first.w)));
        }
        c += s.c;
    }
    Ok(first.with_c(c))
}

pub fn concat_channels<T: Scalar>(xs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let shapes: Vec<Shape> = xs.iter().map(|t| t.shape()).collect();
    let os = concat_shape(&shapes)?;
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..os.n {
        for t in xs {
            data.extend_from_slice(t.item(n));
        }
    }
    Tensor4::from_vec(os, data)
}

/// Channels `[start, start + len)` of `x`.
pub fn slice_channels<T: Scalar>(x: &Tensor4<T>, start: usize, len: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    if start + len > s.c {
        return Err(Error::shape("slice_channels", format!("[{start}, {}) out of {s}", start + len)));
    }
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * len * p);
    for n in 0..s.n {
        data.extend_from_slice(&x.item(n)[start * p..(start + len) * p]);
    }
    Tensor4::from_vec(s.with_c(len), data)
}

pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shapes("add", "operands differ", a.shape(), b.shape()));
    }
    Ok(a.zip_map(b, |x, y| x + y))
}

/// Checks that `b` broadcasts onto `a`: channels 1 or equal, spatial 1x1 or equal.
pub fn broadcast_ok(a: Shape, b: Shape) -> bool {
    a.n == b.n && (b.c == 1 || b.c == a.c) && ((b.h == a.h && b.w == a.w) || (b.h == 1 && b.w == 1))
}

#[inline]
fn bidx(b: Shape, n: usize, c: usize, i: usize) -> usize {
    let bc = if b.c == 1 { 0 } else { c };
    let bi = if b.h == 1 && b.w == 1 { 0 } else { i };
    (n * b.c + bc) * b.plane() + bi
}

/// `a * b` with `b` broadcast over channels and/or space.
pub fn mul_broadcast<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if !broadcast_ok(sa, sb) {
        return Err(Error::shapes("mul_broadcast", "second operand does not broadcast", sa, sb));
    }
    let p = sa.plane();
    let mut out = a.clone();
    for n in 0..sa.n {
        for c in 0..sa.c {
            let st = (n * sa.c + c) * p;
            for i in 0..p {
                out.data_mut()[st + i] *= b.data()[bidx(sb, n, c, i)];
            }
        }
    }
    Ok(out)
}

/// Gradients of `mul_broadcast`: `(da, db)`.
pub fn mul_broadcast_backward<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, dy: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    let (sa, sb) = (a.shape(), b.shape());
    let p = sa.plane();
    let mut da = Tensor4::zeros(sa);
    let mut db = Tensor4::zeros(sb);
    for n in 0..sa.n {
        for c in 0..sa.c {
            let st = (n * sa.c + c) * p;
            for i in 0..p {
                let bi = bidx(sb, n, c, i);
                let g = dy.data()[st + i];
                da.data_mut()[st + i] = g * b.data()[bi];
                db.data_mut()[bi] += g * a.data()[st + i];
            }
        }
    }
    (da, db)
}

pub fn combine<T: Scalar>(xs: &[&Tensor4<T>], kind: Combine) -> Result<Tensor4<T>> {
    match kind {
        Combine::ConcatChannels => concat_channels(xs),
        Combine::Add => {
            let (first, rest) = xs.split_first().ok_or_else(|| Error::config("add of zero tensors"))?;
            let mut acc = (*first).clone();
            for (i, t) in rest.iter().enumerate() {
                if t.shape() != acc.shape() {
                    return Err(Error::shape("add", format!("input {} has shape {}, expected {}", i + 1, t.shape(), acc.shape())));
                }
                acc.add_assign(t);
            }
            Ok(acc)
        }
        Combine::MulBroadcast => match xs {
            [a, b] => mul_broadcast(a, b),
            _ => Err(Error::config("mul_broadcast takes exactly two operands")),
        },
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. Returns the
/// output and the per-element scale applied (0 or `1 / (1 - rate)`).
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor4<T>,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<(Tensor4<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !train || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((y, Some(mask)))
}

/// Softmax across channels at every pixel.
pub fn softmax_channels<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let p = s.plane();
    let mut y = x.clone();
    for n in 0..s.n {
        let item = y.item_mut(n);
        for i in 0..p {
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(item[c * p + i]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (item[c * p + i] - m).exp();
                item[c * p + i] = e;
                z += e;
            }
            for c in 0..s.c {
                item[c * p + i] = item[c * p + i] / z;
            }
        }
    }
    y
}

pub fn softmax_channels_backward<T: Scalar>(y: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let s = y.shape();
    let p = s.plane();
    let mut dx = Tensor4::zeros(s);
    for n in 0..s.n {
        let yi = y.item(n);
        let gi = dy.item(n);
        let di = dx.item_mut(n);
        for i in 0..p {
            let mut dot = T::zero();
            for c in 0..s.c {
                dot += yi[c * p + i] * gi[c * p + i];
            }
            for c in 0..s.c {
                di[c * p + i] = yi[c * p + i] * (gi[c * p + i] - dot);
            }
        }
    }
    dx
}
