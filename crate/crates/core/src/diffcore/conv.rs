//! Convolution kernels: general grouped conv, a direct depthwise path, and
//! transposed convolution, each with its backward pass.
//!
//! Weights use `(out_c, in_c / groups, kh, kw)` for convolution and
//! `(in_c, out_c, kh, kw)` for transposed convolution, so a transposed
//! convolution is exactly the data-gradient of the convolution sharing its
//! weight tensor.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor4};

/// Stride, padding, dilation and grouping of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl ConvSpec {
    pub fn same3x3() -> Self {
        ConvSpec { padding: 1, ..Default::default() }
    }

    pub fn dilated3x3(rate: usize) -> Self {
        ConvSpec { padding: rate, dilation: rate, ..Default::default() }
    }

    pub fn depthwise3x3(channels: usize) -> Self {
        ConvSpec { padding: 1, groups: channels, ..Default::default() }
    }

    pub fn strided3x3(stride: usize) -> Self {
        ConvSpec { stride, padding: 1, ..Default::default() }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        ConvSpec { stride, ..self }
    }

    /// Effective kernel extent `(k - 1) * dilation + 1`.
    pub fn extent(&self, k: usize) -> usize {
        (k - 1) * self.dilation + 1
    }

    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        let ext = self.extent(k);
        if padded < ext || self.stride == 0 {
            return None;
        }
        Some((padded - ext) / self.stride + 1)
    }

    /// Output length of the transposed convolution with this spec.
    pub fn transposed_out_len(&self, len: usize, k: usize) -> Option<usize> {
        ((len - 1) * self.stride + self.extent(k)).checked_sub(2 * self.padding).filter(|&v| v > 0)
    }
}

/// Weights plus geometry of one convolution, as a standalone value.
#[derive(Clone, Debug)]
pub struct ConvParams<T = f32> {
    pub kernel: Tensor4<T>,
    pub bias: Option<Vec<T>>,
    pub spec: ConvSpec,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernel: Tensor4<T>, bias: Option<Vec<T>>, spec: ConvSpec) -> Self {
        ConvParams { kernel, bias, spec }
    }

    pub fn is_depthwise(&self, in_c: usize) -> bool {
        self.spec.groups == in_c && self.kernel.shape().c == 1
    }
}

/// Convolution geometry for one image of one group.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `src` (`c*h*w`) into a `(c*kh*kw) x (oh*ow)` column matrix.
pub(crate) fn im2col<T: Scalar>(src: &[T], g: &Geom, col: &mut [T]) {
    let cols = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let dy = (ki * g.dil) as isize - g.pad as isize;
            let rows = valid_span(g.oh, g.h, g.stride, dy);
            for kj in 0..g.kw {
                let dst = &mut col[row * cols..(row + 1) * cols];
                let dx = (kj * g.dil) as isize - g.pad as isize;
                let span = valid_span(g.ow, g.w, g.stride, dx);
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if !rows.contains(&oy) || span.is_empty() {
                        out.fill(T::zero());
                        continue;
                    }
                    let iy = ((oy * g.stride) as isize + dy) as usize;
                    let ix0 = ((span.start * g.stride) as isize + dx) as usize;
                    let src_row = &plane[iy * g.w + ix0..(iy + 1) * g.w];
                    out[..span.start].fill(T::zero());
                    out[span.end..].fill(T::zero());
                    let mid = &mut out[span.clone()];
                    if g.stride == 1 {
                        mid.copy_from_slice(&src_row[..mid.len()]);
                    } else {
                        for (o, &v) in mid.iter_mut().zip(src_row.iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds a column matrix back, accumulating into `dst` (`c*h*w`).
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &Geom, dst: &mut [T]) {
    let cols = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let dy = (ki * g.dil) as isize - g.pad as isize;
            let rows = valid_span(g.oh, g.h, g.stride, dy);
            for kj in 0..g.kw {
                let src = &col[row * cols..(row + 1) * cols];
                let dx = (kj * g.dil) as isize - g.pad as isize;
                let span = valid_span(g.ow, g.w, g.stride, dx);
                row += 1;
                if span.is_empty() {
                    continue;
                }
                let ix0 = ((span.start * g.stride) as isize + dx) as usize;
                for oy in rows.clone() {
                    let iy = ((oy * g.stride) as isize + dy) as usize;
                    let dst_row = &mut plane[iy * g.w + ix0..(iy + 1) * g.w];
                    let vals = &src[oy * g.ow + span.start..oy * g.ow + span.end];
                    if g.stride == 1 {
                        for (d, &v) in dst_row.iter_mut().zip(vals) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst_row.iter_mut().step_by(g.stride).zip(vals) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn validate(x: Shape, k: Shape, bias: Option<usize>, spec: &ConvSpec) -> Result<Shape> {
    if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
        return Err(Error::config(format!("conv2d: stride, dilation and groups must be positive, got {spec:?}")));
    }
    if x.c % spec.groups != 0 || k.n % spec.groups != 0 {
        return Err(Error::config(format!(
            "conv2d: {} input channels / {} output channels not divisible by groups {}",
            x.c, k.n, spec.groups
        )));
    }
    if x.c / spec.groups != k.c {
        return Err(Error::shapes("conv2d", "input channels per group vs kernel", x, k));
    }
    if let Some(b) = bias {
        if b != k.n {
            return Err(Error::shape("conv2d", format!("bias length {b} vs {} output channels", k.n)));
        }
    }
    let oh = spec.out_len(x.h, k.h);
    let ow = spec.out_len(x.w, k.w);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape::new(x.n, k.n, oh, ow)),
        _ => Err(Error::shapes("conv2d", "kernel extent exceeds padded input", x, k)),
    }
}

/// Output shape of `conv2d`, or the configuration error it would raise.
pub fn conv2d_shape(x: Shape, k: Shape, spec: &ConvSpec) -> Result<Shape> {
    validate(x, k, None, spec)
}

fn geom(x: Shape, k: Shape, out: Shape, spec: &ConvSpec) -> Geom {
    Geom {
        c: x.c / spec.groups,
        h: x.h,
        w: x.w,
        kh: k.h,
        kw: k.w,
        stride: spec.stride,
        pad: spec.padding,
        dil: spec.dilation,
        oh: out.h,
        ow: out.w,
    }
}

fn is_depthwise(x: Shape, k: Shape, spec: &ConvSpec) -> bool {
    spec.groups == x.c && k.c == 1 && k.n == x.c
}

/// 2-D cross-correlation with optional bias.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    let ks = kernel.shape();
    let os = validate(xs, ks, bias.map(<[T]>::len), spec)?;
    if is_depthwise(xs, ks, spec) {
        return Ok(depthwise_forward(x, kernel, bias, spec, os));
    }
    let g = geom(xs, ks, os, spec);
    let groups = spec.groups;
    let opg = ks.n / groups;
    let kdim = g.rows();
    let p = g.cols();
    let mut out = Tensor4::zeros(os);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * p] };
    for n in 0..xs.n {
        let xi = x.item(n);
        let yi = out.item_mut(n);
        for gi in 0..groups {
            let src = &xi[gi * g.c * xs.plane()..(gi + 1) * g.c * xs.plane()];
            let w = &kernel.data()[gi * opg * kdim..(gi + 1) * opg * kdim];
            let y = &mut yi[gi * opg * p..(gi + 1) * opg * p];
            if g.is_pointwise() {
                T::gemm(opg, kdim, p, w, false, src, false, y, T::zero());
            } else {
                im2col(src, &g, &mut col);
                T::gemm(opg, kdim, p, w, false, &col, false, y, T::zero());
            }
        }
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                for v in &mut yi[o * p..(o + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d_forward`. Returns `(dx, dkernel, dbias)`; `dx` is only
/// computed when `need_dx` is set.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    spec: &ConvSpec,
    dy: &Tensor4<T>,
    need_dx: bool,
) -> (Option<Tensor4<T>>, Tensor4<T>, Vec<T>) {
    let xs = x.shape();
    let ks = kernel.shape();
    let os = dy.shape();
    let mut db = vec![T::zero(); ks.n];
    for n in 0..os.n {
        for (o, b) in db.iter_mut().enumerate() {
            *b += dy.plane(n, o).iter().copied().sum();
        }
    }
    if is_depthwise(xs, ks, spec) {
        let (dx, dk) = depthwise_backward(x, kernel, spec, dy, need_dx);
        return (dx, dk, db);
    }
    let g = geom(xs, ks, os, spec);
    let groups = spec.groups;
    let opg = ks.n / groups;
    let kdim = g.rows();
    let p = g.cols();
    let mut dk = Tensor4::zeros(ks);
    let mut dx = if need_dx { Some(Tensor4::zeros(xs)) } else { None };
    let mut col = vec![T::zero(); kdim * p];
    for n in 0..xs.n {
        let xi = x.item(n);
        let dyi = dy.item(n);
        for gi in 0..groups {
            let src = &xi[gi * g.c * xs.plane()..(gi + 1) * g.c * xs.plane()];
            let dyg = &dyi[gi * opg * p..(gi + 1) * opg * p];
            let dw = &mut dk.data_mut()[gi * opg * kdim..(gi + 1) * opg * kdim];
            if g.is_pointwise() {
                T::gemm(opg, p, kdim, dyg, false, src, true, dw, T::one());
            } else {
                im2col(src, &g, &mut col);
                T::gemm(opg, p, kdim, dyg, false, &col, true, dw, T::one());
            }
            if let Some(dx) = dx.as_mut() {
                let w = &kernel.data()[gi * opg * kdim..(gi + 1) * opg * kdim];
                let dst = &mut dx.item_mut(n)[gi * g.c * xs.plane()..(gi + 1) * g.c * xs.plane()];
                if g.is_pointwise() {
                    T::gemm(kdim, opg, p, w, true, dyg, false, dst, T::one());
                } else {
                    T::gemm(kdim, opg, p, w, true, dyg, false, &mut col, T::zero());
                    col2im(&col, &g, dst);
                }
            }
        }
    }
    (dx, dk, db)
}

/// Output positions `o < out_len` whose input index `o*s + off` lies in
/// `0..in_len`.
fn valid_span(out_len: usize, in_len: usize, s: usize, off: isize) -> std::ops::Range<usize> {
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let reach = in_len as isize - off;
    let hi = if reach <= 0 { 0 } else { (reach as usize).div_ceil(s).min(out_len) };
    lo..hi.max(lo)
}

fn depthwise_forward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
    os: Shape,
) -> Tensor4<T> {
    let xs = x.shape();
    let ks = kernel.shape();
    let mut out = Tensor4::zeros(os);
    let taps = ks.h * ks.w;
    let (s, p, d) = (spec.stride, spec.padding as isize, spec.dilation as isize);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = x.plane(n, c);
            let w = &kernel.data()[c * taps..(c + 1) * taps];
            let b = bias.map_or(T::zero(), |b| b[c]);
            let start = out.index(n, c, 0, 0);
            let dst = &mut out.data_mut()[start..start + os.plane()];
            dst.fill(b);
            for ki in 0..ks.h {
                let rows = valid_span(os.h, xs.h, s, ki as isize * d - p);
                for kj in 0..ks.w {
                    let wv = w[ki * ks.w + kj];
                    let offx = kj as isize * d - p;
                    let cols = valid_span(os.w, xs.w, s, offx);
                    if cols.is_empty() {
                        continue;
                    }
                    for oy in rows.clone() {
                        let iy = (oy * s) as isize + ki as isize * d - p;
                        let row = &src[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        let orow = &mut dst[oy * os.w + cols.start..oy * os.w + cols.end];
                        let ix0 = (cols.start * s) as isize + offx;
                        if s == 1 {
                            for (o, &v) in orow.iter_mut().zip(&row[ix0 as usize..]) {
                                *o += wv * v;
                            }
                        } else {
                            for (o, &v) in orow.iter_mut().zip(row[ix0 as usize..].iter().step_by(s)) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    spec: &ConvSpec,
    dy: &Tensor4<T>,
    need_dx: bool,
) -> (Option<Tensor4<T>>, Tensor4<T>) {
    let xs = x.shape();
    let ks = kernel.shape();
    let os = dy.shape();
    let taps = ks.h * ks.w;
    let (s, p, d) = (spec.stride, spec.padding as isize, spec.dilation as isize);
    let mut dk = Tensor4::zeros(ks);
    let mut dx = if need_dx { Some(Tensor4::zeros(xs)) } else { None };
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = x.plane(n, c);
            let g = dy.plane(n, c);
            let dxs = dx.as_ref().map(|t| t.index(n, c, 0, 0));
            for ki in 0..ks.h {
                let rows = valid_span(os.h, xs.h, s, ki as isize * d - p);
                for kj in 0..ks.w {
                    let tap = c * taps + ki * ks.w + kj;
                    let wv = kernel.data()[tap];
                    let offx = kj as isize * d - p;
                    let cols = valid_span(os.w, xs.w, s, offx);
                    if cols.is_empty() {
                        continue;
                    }
                    let ix0 = ((cols.start * s) as isize + offx) as usize;
                    let mut acc = T::zero();
                    for oy in rows.clone() {
                        let iy = ((oy * s) as isize + ki as isize * d - p) as usize;
                        let grow = &g[oy * os.w + cols.start..oy * os.w + cols.end];
                        let row = &src[iy * xs.w + ix0..(iy + 1) * xs.w];
                        if s == 1 {
                            acc += grow.iter().zip(row).fold(T::zero(), |a, (&gv, &v)| a + gv * v);
                        } else {
                            acc += grow.iter().zip(row.iter().step_by(s)).fold(T::zero(), |a, (&gv, &v)| a + gv * v);
                        }
                        if let (Some(t), Some(st)) = (dx.as_mut(), dxs) {
                            let drow = &mut t.data_mut()[st + iy * xs.w + ix0..st + (iy + 1) * xs.w];
                            if s == 1 {
                                for (o, &gv) in drow.iter_mut().zip(grow) {
                                    *o += gv * wv;
                                }
                            } else {
                                for (o, &gv) in drow.iter_mut().step_by(s).zip(grow) {
                                    *o += gv * wv;
                                }
                            }
                        }
                    }
                    dk.data_mut()[tap] += acc;
                }
            }
        }
    }
    (dx, dk)
}

/// Standalone depthwise convolution; rejects any kernel whose grouping is not
/// one filter per input channel.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let xs = x.shape();
    if p.spec.groups != xs.c || p.kernel.shape().c != 1 || p.kernel.shape().n != xs.c {
        return Err(Error::config(format!(
            "depthwise_conv2d: groups {} / kernel {} incompatible with {} input channels",
            p.spec.groups,
            p.kernel.shape(),
            xs.c
        )));
    }
    conv2d_forward(x, &p.kernel, p.bias.as_deref(), &p.spec)
}

pub fn conv2d<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    conv2d_forward(x, &p.kernel, p.bias.as_deref(), &p.spec)
}

fn transposed_geom(x: Shape, k: Shape, spec: &ConvSpec) -> Result<(Shape, Geom)> {
    if spec.groups != 1 {
        return Err(Error::config("transposed_conv2d supports groups == 1 only"));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::config("transposed_conv2d: stride and dilation must be positive"));
    }
    if x.c != k.n {
        return Err(Error::shapes("transposed_conv2d", "input channels vs kernel", x, k));
    }
    let (oh, ow) = match (spec.transposed_out_len(x.h, k.h), spec.transposed_out_len(x.w, k.w)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::shapes("transposed_conv2d", "padding removes whole output", x, k)),
    };
    let out = Shape::new(x.n, k.c, oh, ow);
    // The equivalent forward convolution maps `out` back onto `x`'s grid.
    let g = Geom {
        c: k.c,
        h: oh,
        w: ow,
        kh: k.h,
        kw: k.w,
        stride: spec.stride,
        pad: spec.padding,
        dil: spec.dilation,
        oh: x.h,
        ow: x.w,
    };
    if spec.out_len(oh, k.h) != Some(x.h) || spec.out_len(ow, k.w) != Some(x.w) {
        return Err(Error::shapes("transposed_conv2d", "geometry not invertible", x, k));
    }
    Ok((out, g))
}

/// Transposed convolution with kernel layout `(in_c, out_c, kh, kw)`.
pub fn transposed_conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    let ks = kernel.shape();
    let (os, g) = transposed_geom(xs, ks, spec)?;
    if let Some(b) = bias {
        if b.len() != os.c {
            return Err(Error::shape("transposed_conv2d", format!("bias length {} vs {} channels", b.len(), os.c)));
        }
    }
    let rows = g.rows();
    let p = xs.plane();
    let mut col = vec![T::zero(); rows * p];
    let mut out = Tensor4::zeros(os);
    for n in 0..xs.n {
        T::gemm(rows, xs.c, p, kernel.data(), true, x.item(n), false, &mut col, T::zero());
        let dst = out.item_mut(n);
        col2im(&col, &g, dst);
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                for v in &mut dst[o * os.plane()..(o + 1) * os.plane()] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

pub fn transposed_conv2d<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    transposed_conv2d_forward(x, &p.kernel, p.bias.as_deref(), &p.spec)
}

/// Gradients of `transposed_conv2d_forward`: `(dx, dkernel, dbias)`.
pub fn transposed_conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    spec: &ConvSpec,
    dy: &Tensor4<T>,
    need_dx: bool,
) -> (Option<Tensor4<T>>, Tensor4<T>, Vec<T>) {
    let xs = x.shape();
    let ks = kernel.shape();
    let os = dy.shape();
    let (_, g) = transposed_geom(xs, ks, spec).expect("validated in forward");
    let rows = g.rows();
    let p = xs.plane();
    let mut db = vec![T::zero(); os.c];
    let mut dk = Tensor4::zeros(ks);
    let mut col = vec![T::zero(); rows * p];
    for n in 0..xs.n {
        for (o, b) in db.iter_mut().enumerate() {
            *b += dy.plane(n, o).iter().copied().sum();
        }
        im2col(dy.item(n), &g, &mut col);
        T::gemm(xs.c, p, rows, x.item(n), false, &col, true, dk.data_mut(), T::one());
    }
    let dx = need_dx.then(|| {
        let fwd = ConvSpec { groups: 1, ..*spec };
        conv2d_forward(dy, kernel, None, &fwd).expect("transposed geometry is invertible")
    });
    (dx, dk, db)
}
