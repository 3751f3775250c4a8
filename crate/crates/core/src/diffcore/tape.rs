//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] records every operation applied to tracked values. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates
//! vector-Jacobian products into a gradient per node. Untracked values
//! (inputs, frozen weights) never store a backward closure.

use std::hash::{DefaultHasher, Hash, Hasher};

use super::conv::{self, ConvSpec};
use super::elementwise::{self as ew, Activation};
use super::norm::{self, BatchStats};
use super::pool::{self, PoolKind};
use super::resize::{self, ResizeKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Scalar> {
    fn inputs(&self) -> &[Var];

    /// Returns one gradient per entry of [`Backward::inputs`]; entries whose
    /// `needs` flag is false may be `None`.
    fn vjp(&self, tape: &Tape<T>, out: &Tensor4<T>, grad: &Tensor4<T>, needs: &[bool]) -> Vec<Option<Tensor4<T>>>;
}

pub struct Tape<T: Scalar = f32> {
    values: Vec<Tensor4<T>>,
    ops: Vec<Option<Box<dyn Backward<T>>>>,
    tracked: Vec<bool>,
    branches: Option<DefaultHasher>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), tracked: Vec::new(), branches: None }
    }

    /// Starts fingerprinting every discrete branch taken by piecewise ops
    /// (ReLU signs, pooling argmax, sort orders). Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn track_branches(&mut self) {
        self.branches.get_or_insert_with(DefaultHasher::new);
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.as_ref().map(|h| h.clone().finish())
    }

    /// Folds a discrete branch decision into the fingerprint, if tracking.
    pub fn note_branch<H: Hash + ?Sized>(&mut self, decision: &H) {
        if let Some(h) = &mut self.branches {
            decision.hash(h);
        }
    }

    fn note_signs(&mut self, x: Var) {
        if self.branches.is_some() {
            let signs: Vec<bool> = self.values[x.0].data().iter().map(|&v| v > T::zero()).collect();
            self.note_branch(&signs);
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor4<T>) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor4<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor4<T>, tracked: bool) -> Var {
        self.values.push(t);
        self.ops.push(None);
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.values[v.0].shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    /// Records a value produced by a custom operation.
    pub fn push(&mut self, value: Tensor4<T>, op: Box<dyn Backward<T>>) -> Var {
        let tracked = op.inputs().iter().any(|v| self.tracked[v.0]);
        self.values.push(value);
        self.ops.push(if tracked { Some(op) } else { None });
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Grads<T> {
        self.backward_with(root, Tensor4::ones(self.shape(root)))
    }

    pub fn backward_with(&self, root: Var, seed: Tensor4<T>) -> Grads<T> {
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.values.len()).map(|_| None).collect();
        if !self.tracked[root.0] {
            return Grads { grads };
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(op) = &self.ops[i] else { continue };
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = op.inputs().iter().map(|v| self.tracked[v.0]).collect();
            let input_grads = op.vjp(self, &self.values[i], &g, &needs);
            for ((v, ig), need) in op.inputs().iter().zip(input_grads).zip(needs) {
                let (Some(ig), true) = (ig, need) else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            // Leaves keep their gradient; interior nodes were consumed above.
        }
        Grads { grads }
    }

    // ---- convolution ----------------------------------------------------

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let b = bias.map(|b| self.value(b).data().to_vec());
        let y = conv::conv2d_forward(self.value(x), self.value(kernel), b.as_deref(), &spec)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(y, Box::new(ConvOp { inputs, spec, transposed: false })))
    }

    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let b = bias.map(|b| self.value(b).data().to_vec());
        let y = conv::transposed_conv2d_forward(self.value(x), self.value(kernel), b.as_deref(), &spec)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(y, Box::new(ConvOp { inputs, spec, transposed: true })))
    }

    // ---- normalization --------------------------------------------------

    /// Training-mode batch norm; returns the batch statistics for the caller
    /// to fold into running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (y, stats) = norm::batch_norm_train(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps)?;
        let op = BatchNormOp { inputs: [x, gamma, beta], stats: Some(stats.clone()), running: None, eps };
        Ok((self.push(y, Box::new(op)), stats))
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let y = norm::batch_norm_eval(self.value(x), self.value(gamma).data(), self.value(beta).data(), mean, var, eps)?;
        let op = BatchNormOp { inputs: [x, gamma, beta], stats: None, running: Some((mean.to_vec(), var.to_vec())), eps };
        Ok(self.push(y, Box::new(op)))
    }

    // ---- pointwise ------------------------------------------------------

    pub fn activate(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Relu {
            self.note_signs(x);
        }
        let y = ew::activate(self.value(x), kind);
        self.push(y, Box::new(ActOp { inputs: [x], kind }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Sigmoid)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v * s);
        self.push(y, Box::new(ScaleOp { inputs: [x], s }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ew::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Box::new(AddOp { inputs: vec![a, b], signs: vec![T::one(), T::one()] })))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ew::add(self.value(a), &self.value(b).map(|v| -v))?;
        Ok(self.push(y, Box::new(AddOp { inputs: vec![a, b], signs: vec![T::one(), -T::one()] })))
    }

    /// Sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor4<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ew::combine(&refs, ew::Combine::Add)?;
        Ok(self.push(y, Box::new(AddOp { inputs: xs.to_vec(), signs: vec![T::one(); xs.len()] })))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ew::mul_broadcast(self.value(a), self.value(b))?;
        Ok(self.push(y, Box::new(MulOp { inputs: [a, b] })))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let y = ew::softmax_channels(self.value(x));
        self.push(y, Box::new(SoftmaxOp { inputs: [x] }))
    }

    /// Multiplies by a fixed per-element mask (dropout with a precomputed mask).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        let mut y = self.value(x).clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(y, Box::new(MaskOp { inputs: [x], mask }))
    }

    // ---- structural -----------------------------------------------------

    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (y, argmax) = pool::pool_forward(self.value(x), kind)?;
        self.note_branch(&argmax);
        let input = self.shape(x);
        Ok(self.push(y, Box::new(PoolOp { inputs: [x], argmax, input })))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let inv = T::one() / T::from_usize(s.plane()).unwrap();
        let data: Vec<T> = (0..s.n).flat_map(|n| (0..s.c).map(move |c| (n, c))).map(|(n, c)| t.plane(n, c).iter().copied().sum::<T>() * inv).collect();
        let y = Tensor4::from_vec(Shape::new(s.n, s.c, 1, 1), data).unwrap();
        self.push(y, Box::new(AvgPoolOp { inputs: [x], input: s }))
    }

    pub fn resize_bilinear(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let input = self.shape(x);
        if (input.h, input.w) == target {
            return Ok(x);
        }
        let y = resize::resize(self.value(x), ResizeKind::Bilinear, target)?;
        Ok(self.push(y, Box::new(ResizeOp { inputs: [x], input })))
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor4<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ew::concat_channels(&refs)?;
        let widths = xs.iter().map(|&v| self.shape(v).c).collect();
        Ok(self.push(y, Box::new(ConcatOp { inputs: xs.to_vec(), widths })))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = ew::slice_channels(self.value(x), start, len)?;
        let input = self.shape(x);
        Ok(self.push(y, Box::new(SliceOp { inputs: [x], start, input })))
    }

    /// Channel-wise mean and max maps, concatenated as two channels.
    pub fn channel_mean_max(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let p = s.plane();
        let inv = T::one() / T::from_usize(s.c).unwrap();
        let mut data = vec![T::zero(); s.n * 2 * p];
        let mut argmax = vec![0usize; s.n * p];
        for n in 0..s.n {
            let item = t.item(n);
            for i in 0..p {
                let mut sum = T::zero();
                let mut best = 0;
                for c in 0..s.c {
                    let v = item[c * p + i];
                    sum += v;
                    if v > item[best * p + i] {
                        best = c;
                    }
                }
                data[n * 2 * p + i] = sum * inv;
                data[n * 2 * p + p + i] = item[best * p + i];
                argmax[n * p + i] = best;
            }
        }
        let y = Tensor4::from_vec(s.with_c(2), data).unwrap();
        self.note_branch(&argmax);
        self.push(y, Box::new(ChannelStatOp { inputs: [x], argmax, input: s }))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let input = self.shape(x);
        Ok(self.push(y, Box::new(ReshapeOp { inputs: [x], input })))
    }

    /// Sum of all elements as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor4::scalar(self.value(x).sum());
        let input = self.shape(x);
        self.push(y, Box::new(SumOp { inputs: [x], input, scale: T::one() }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let input = self.shape(x);
        let scale = T::one() / T::from_usize(input.numel()).unwrap();
        let y = Tensor4::scalar(self.value(x).sum() * scale);
        self.push(y, Box::new(SumOp { inputs: [x], input, scale }))
    }

    /// Mean squared error between `a` and `b`, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shapes("mse", "operands differ", ta.shape(), tb.shape()));
        }
        let n = T::from_usize(ta.len()).unwrap();
        let v = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        Ok(self.push(Tensor4::scalar(v), Box::new(MseOp { inputs: [a, b] })))
    }
}

fn unwrap_input<T: Scalar>(needs: bool, f: impl FnOnce() -> Tensor4<T>) -> Option<Tensor4<T>> {
    needs.then(f)
}

fn bias_grad<T: Scalar>(db: Vec<T>) -> Tensor4<T> {
    let c = db.len();
    Tensor4::from_vec([1, c, 1, 1], db).unwrap()
}

struct ConvOp {
    inputs: Vec<Var>,
    spec: ConvSpec,
    transposed: bool,
}

impl<T: Scalar> Backward<T> for ConvOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        let x = tape.value(self.inputs[0]);
        let k = tape.value(self.inputs[1]);
        let (dx, dk, db) = if self.transposed {
            conv::transposed_conv2d_backward(x, k, &self.spec, grad, needs[0])
        } else {
            conv::conv2d_backward(x, k, &self.spec, grad, needs[0])
        };
        let mut out = vec![dx, Some(dk)];
        if self.inputs.len() == 3 {
            let bshape = tape.shape(self.inputs[2]);
            out.push(Some(bias_grad(db).reshape(bshape).unwrap()));
        }
        out
    }
}

struct BatchNormOp<T> {
    inputs: [Var; 3],
    stats: Option<BatchStats<T>>,
    running: Option<(Vec<T>, Vec<T>)>,
    eps: T,
}

impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        let x = tape.value(self.inputs[0]);
        let gamma = tape.value(self.inputs[1]);
        let (dx, dg, db) = match (&self.stats, &self.running) {
            (Some(stats), _) => norm::batch_norm_train_backward(x, gamma.data(), stats, grad),
            (None, Some((m, v))) => norm::batch_norm_eval_backward(x, gamma.data(), m, v, self.eps, grad),
            (None, None) => unreachable!("batch norm op records either batch or running statistics"),
        };
        let gs = gamma.shape();
        vec![Some(dx), Some(bias_grad(dg).reshape(gs).unwrap()), Some(bias_grad(db).reshape(gs).unwrap())]
    }
}

struct ActOp {
    inputs: [Var; 1],
    kind: Activation,
}

impl<T: Scalar> Backward<T> for ActOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, tape: &Tape<T>, out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        vec![Some(ew::activate_backward(tape.value(self.inputs[0]), out, grad, self.kind))]
    }
}

struct ScaleOp<T> {
    inputs: [Var; 1],
    s: T,
}

impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        vec![Some(grad.map(|g| g * self.s))]
    }
}

struct AddOp<T> {
    inputs: Vec<Var>,
    signs: Vec<T>,
}

impl<T: Scalar> Backward<T> for AddOp<T> {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        self.signs
            .iter()
            .zip(needs)
            .map(|(&s, &need)| unwrap_input(need, || if s == T::one() { grad.clone() } else { grad.map(|g| g * s) }))
            .collect()
    }
}

struct MulOp {
    inputs: [Var; 2],
}

impl<T: Scalar> Backward<T> for MulOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        let (da, db) = ew::mul_broadcast_backward(tape.value(self.inputs[0]), tape.value(self.inputs[1]), grad);
        vec![Some(da), Some(db)]
    }
}

struct SoftmaxOp {
    inputs: [Var; 1],
}

impl<T: Scalar> Backward<T> for SoftmaxOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        vec![Some(ew::softmax_channels_backward(out, grad))]
    }
}

struct MaskOp<T> {
    inputs: [Var; 1],
    mask: Vec<T>,
}

impl<T: Scalar> Backward<T> for MaskOp<T> {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        let mut g = grad.clone();
        for (v, &m) in g.data_mut().iter_mut().zip(&self.mask) {
            *v *= m;
        }
        vec![Some(g)]
    }
}

struct PoolOp {
    inputs: [Var; 1],
    argmax: Vec<usize>,
    input: Shape,
}

impl<T: Scalar> Backward<T> for PoolOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        vec![Some(pool::pool_backward(self.input, &self.argmax, grad))]
    }
}

struct AvgPoolOp {
    inputs: [Var; 1],
    input: Shape,
}

impl<T: Scalar> Backward<T> for AvgPoolOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        let s = self.input;
        let inv = T::one() / T::from_usize(s.plane()).unwrap();
        let g = grad.data();
        vec![Some(Tensor4::from_fn(s, |n, c, _, _| g[n * s.c + c] * inv))]
    }
}

struct ResizeOp {
    inputs: [Var; 1],
    input: Shape,
}

impl<T: Scalar> Backward<T> for ResizeOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        vec![Some(resize::bilinear_backward(self.input, grad))]
    }
}

struct ConcatOp {
    inputs: Vec<Var>,
    widths: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        let mut start = 0;
        self.widths
            .iter()
            .zip(needs)
            .map(|(&w, &need)| {
                let g = need.then(|| ew::slice_channels(grad, start, w).unwrap());
                start += w;
                g
            })
            .collect()
    }
}

struct SliceOp {
    inputs: [Var; 1],
    start: usize,
    input: Shape,
}

impl<T: Scalar> Backward<T> for SliceOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        let s = self.input;
        let gs = grad.shape();
        let p = s.plane();
        let mut dx = Tensor4::zeros(s);
        for n in 0..s.n {
            dx.item_mut(n)[self.start * p..(self.start + gs.c) * p].copy_from_slice(grad.item(n));
        }
        vec![Some(dx)]
    }
}

struct ChannelStatOp {
    inputs: [Var; 1],
    argmax: Vec<usize>,
    input: Shape,
}

impl<T: Scalar> Backward<T> for ChannelStatOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        let s = self.input;
        let p = s.plane();
        let inv = T::one() / T::from_usize(s.c).unwrap();
        let mut dx = Tensor4::zeros(s);
        for n in 0..s.n {
            let g = grad.item(n);
            let d = dx.item_mut(n);
            for i in 0..p {
                let gm = g[i] * inv;
                for c in 0..s.c {
                    d[c * p + i] += gm;
                }
                d[self.argmax[n * p + i] * p + i] += g[p + i];
            }
        }
        vec![Some(dx)]
    }
}

struct ReshapeOp {
    inputs: [Var; 1],
    input: Shape,
}

impl<T: Scalar> Backward<T> for ReshapeOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        vec![Some(grad.clone().reshape(self.input).unwrap())]
    }
}

struct SumOp<T> {
    inputs: [Var; 1],
    input: Shape,
    scale: T,
}

impl<T: Scalar> Backward<T> for SumOp<T> {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        vec![Some(Tensor4::full(self.input, grad.data()[0] * self.scale))]
    }
}

struct MseOp {
    inputs: [Var; 2],
}

impl<T: Scalar> Backward<T> for MseOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        let (a, b) = (tape.value(self.inputs[0]), tape.value(self.inputs[1]));
        let k = grad.data()[0] * T::lit(2.0) / T::from_usize(a.len()).unwrap();
        let da = a.zip_map(b, |x, y| (x - y) * k);
        let db = needs[1].then(|| da.map(|v| -v));
        vec![Some(da), db]
    }
}
