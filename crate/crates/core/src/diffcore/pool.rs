//! Max pooling. Gradients route to the recorded argmax; ties resolve to the
//! first element in row-major scan order.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    MaxPool2x2,
    GlobalMax,
}

/// Output plus, for each output element, the flat input index it came from.
pub fn pool_forward<T: Scalar>(x: &Tensor4<T>, kind: PoolKind) -> Result<(Tensor4<T>, Vec<usize>)> {
    let s = x.shape();
    match kind {
        PoolKind::MaxPool2x2 => {
            if s.h % 2 != 0 || s.w % 2 != 0 {
                return Err(Error::config(format!("maxpool2x2 needs even spatial dims, got {s}")));
            }
            let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
            let mut out = Vec::with_capacity(os.numel());
            let mut arg = Vec::with_capacity(os.numel());
            for n in 0..s.n {
                for c in 0..s.c {
                    for oy in 0..os.h {
                        for ox in 0..os.w {
                            let mut best = x.index(n, c, 2 * oy, 2 * ox);
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let i = x.index(n, c, 2 * oy + dy, 2 * ox + dx);
                                if x.data()[i] > x.data()[best] {
                                    best = i;
                                }
                            }
                            out.push(x.data()[best]);
                            arg.push(best);
                        }
                    }
                }
            }
            Ok((Tensor4::from_vec(os, out)?, arg))
        }
        PoolKind::GlobalMax => {
            if s.plane() == 0 {
                return Err(Error::config("global max pool over an empty plane"));
            }
            let os = Shape::new(s.n, s.c, 1, 1);
            let mut out = Vec::with_capacity(os.numel());
            let mut arg = Vec::with_capacity(os.numel());
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = x.index(n, c, 0, 0);
                    let plane = x.plane(n, c);
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    out.push(plane[best]);
                    arg.push(base + best);
                }
            }
            Ok((Tensor4::from_vec(os, out)?, arg))
        }
    }
}

pub fn pool<T: Scalar>(x: &Tensor4<T>, kind: PoolKind) -> Result<Tensor4<T>> {
    pool_forward(x, kind).map(|(y, _)| y)
}

pub fn pool_backward<T: Scalar>(input: Shape, argmax: &[usize], dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(input);
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}
