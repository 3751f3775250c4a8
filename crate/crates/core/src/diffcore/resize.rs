//! Spatial resizing. Bilinear uses half-pixel centers (`align_corners = false`)
//! and is differentiable; nearest uses floor index mapping and is data-path only.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeKind {
    Bilinear,
    Nearest,
}

/// Source sample positions and weights along one axis.
#[derive(Clone, Debug)]
struct Axis<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

fn bilinear_axis<T: Scalar>(input: usize, output: usize) -> Axis<T> {
    let scale = input as f64 / output as f64;
    let mut ax = Axis { lo: Vec::with_capacity(output), hi: Vec::with_capacity(output), frac: Vec::with_capacity(output) };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        ax.lo.push(lo);
        ax.hi.push(hi);
        ax.frac.push(T::lit(src - lo as f64));
    }
    ax
}

/// Floor mapping `src = floor(dst * in / out)`.
pub fn nearest_index(dst: usize, input: usize, output: usize) -> usize {
    ((dst * input) / output).min(input - 1)
}

fn check(x: Shape, target: (usize, usize)) -> Result<()> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::config(format!("resize target must be positive, got {target:?}")));
    }
    if x.h == 0 || x.w == 0 {
        return Err(Error::shape("resize", format!("empty input {x}")));
    }
    Ok(())
}

pub fn resize<T: Scalar>(x: &Tensor4<T>, kind: ResizeKind, target: (usize, usize)) -> Result<Tensor4<T>> {
    let s = x.shape();
    check(s, target)?;
    let os = s.with_hw(target.0, target.1);
    match kind {
        ResizeKind::Nearest => {
            let ys: Vec<usize> = (0..os.h).map(|o| nearest_index(o, s.h, os.h)).collect();
            let xs: Vec<usize> = (0..os.w).map(|o| nearest_index(o, s.w, os.w)).collect();
            Ok(Tensor4::from_fn(os, |n, c, y, xx| x.at(n, c, ys[y], xs[xx])))
        }
        ResizeKind::Bilinear => {
            let ay = bilinear_axis::<T>(s.h, os.h);
            let ax = bilinear_axis::<T>(s.w, os.w);
            let mut out = Tensor4::zeros(os);
            let p = os.plane();
            for n in 0..s.n {
                for c in 0..s.c {
                    let src = x.plane(n, c);
                    let st = out.index(n, c, 0, 0);
                    let dst = &mut out.data_mut()[st..st + p];
                    for oy in 0..os.h {
                        let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
                        let r0 = &src[y0 * s.w..(y0 + 1) * s.w];
                        let r1 = &src[y1 * s.w..(y1 + 1) * s.w];
                        for ox in 0..os.w {
                            let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                            dst[oy * os.w + ox] = top + (bot - top) * fy;
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Gradient of bilinear resize with respect to its input.
pub fn bilinear_backward<T: Scalar>(input: Shape, dy: &Tensor4<T>) -> Tensor4<T> {
    let os = dy.shape();
    let ay = bilinear_axis::<T>(input.h, os.h);
    let ax = bilinear_axis::<T>(input.w, os.w);
    let mut dx = Tensor4::zeros(input);
    let p = input.plane();
    for n in 0..input.n {
        for c in 0..input.c {
            let g = dy.plane(n, c);
            let st = dx.index(n, c, 0, 0);
            let dst = &mut dx.data_mut()[st..st + p];
            for oy in 0..os.h {
                let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], ay.frac[oy]);
                for ox in 0..os.w {
                    let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                    let v = g[oy * os.w + ox];
                    let one = T::one();
                    dst[y0 * input.w + x0] += v * (one - fy) * (one - fx);
                    dst[y0 * input.w + x1] += v * (one - fy) * fx;
                    dst[y1 * input.w + x0] += v * fy * (one - fx);
                    dst[y1 * input.w + x1] += v * fy * fx;
                }
            }
        }
    }
    dx
}
