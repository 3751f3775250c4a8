//! Named parameter storage, a forward session binding parameters onto a tape,
//! and the small layers every block is assembled from.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::conv::ConvSpec;
use crate::diffcore::elementwise;
use crate::diffcore::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::diffcore::norm::{self, Mode};
use crate::diffcore::tape::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable tensor.
    Weight,
    /// Batch-norm running statistic; saved but never optimized.
    RunningStat,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor4<T>,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors owned by one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4<T>, kind: ParamKind) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor4<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable elements.
    pub fn count_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Weight).map(|e| e.value.len()).sum()
    }

    /// Trainable element count of entries whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.value.clear_grad();
        }
    }

    /// Converts every tensor to another scalar type (names and kinds kept).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), kind: e.kind })
                .collect(),
        }
    }

    /// Replaces values from `(name, tensor)` pairs; every entry must be supplied
    /// with a matching shape.
    pub fn load_named(&mut self, tensors: &HashMap<String, Tensor4<f32>>) -> Result<()> {
        for e in &mut self.entries {
            let t = tensors
                .get(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {}, model expects {}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.cast();
        }
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix with He-normal init.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder { store, rng, prefix: String::new() }
    }

    pub fn scope<'b>(&'b mut self, name: &str) -> ParamBuilder<'b, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    fn he_normal(&mut self, shape: Shape, fan_in: usize) -> Tensor4<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        Tensor4::from_fn(shape, |_, _, _, _| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z * std)
        })
    }

    /// Convolution weight `(out_c, in_c / groups, k, k)`.
    pub fn conv(&mut self, in_c: usize, out_c: usize, k: usize, spec: ConvSpec, bias: bool) -> Conv {
        let shape = Shape::new(out_c, in_c / spec.groups, k, k);
        let w = self.he_normal(shape, shape.c * k * k);
        let weight = self.store.insert(self.name("weight"), w, ParamKind::Weight);
        let bias = bias.then(|| self.store.insert(self.name("bias"), Tensor4::zeros([1, out_c, 1, 1]), ParamKind::Weight));
        Conv { weight, bias, spec, transposed: false }
    }

    /// Transposed convolution weight `(in_c, out_c, k, k)`.
    pub fn conv_transpose(&mut self, in_c: usize, out_c: usize, k: usize, spec: ConvSpec, bias: bool) -> Conv {
        let shape = Shape::new(in_c, out_c, k, k);
        let w = self.he_normal(shape, out_c * k * k);
        let weight = self.store.insert(self.name("weight"), w, ParamKind::Weight);
        let bias = bias.then(|| self.store.insert(self.name("bias"), Tensor4::zeros([1, out_c, 1, 1]), ParamKind::Weight));
        Conv { weight, bias, spec, transposed: true }
    }

    pub fn batch_norm(&mut self, c: usize) -> BatchNorm {
        let gamma = self.store.insert(self.name("gamma"), Tensor4::ones([1, c, 1, 1]), ParamKind::Weight);
        let beta = self.store.insert(self.name("beta"), Tensor4::zeros([1, c, 1, 1]), ParamKind::Weight);
        let mean = self.store.insert(self.name("running_mean"), Tensor4::zeros([1, c, 1, 1]), ParamKind::RunningStat);
        let var = self.store.insert(self.name("running_var"), Tensor4::ones([1, c, 1, 1]), ParamKind::RunningStat);
        BatchNorm { gamma, beta, mean, var }
    }

    /// `k x k` convolution without bias, then batch norm, then ReLU.
    pub fn conv_bn_relu(&mut self, in_c: usize, out_c: usize, k: usize, spec: ConvSpec) -> ConvBnRelu {
        let conv = self.scope("conv").conv(in_c, out_c, k, spec, false);
        let bn = self.scope("bn").batch_norm(out_c);
        ConvBnRelu { conv, bn }
    }
}

/// Binds a parameter store onto a tape for one forward pass.
pub struct Session<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    bound: HashMap<ParamId, Var>,
    mode: Mode,
    rng: Option<&'s mut ChaCha8Rng>,
    frozen: bool,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        Session { tape: Tape::new(), store, bound: HashMap::new(), mode, rng: None, frozen: false }
    }

    /// Supplies the stream used for dropout masks in train mode.
    pub fn with_rng(mut self, rng: &'s mut ChaCha8Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Parameters enter the tape as constants: no gradients are recorded.
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.frozen { self.tape.constant(t) } else { self.tape.param(t) };
        self.bound.insert(id, v);
        v
    }

    pub fn input(&mut self, t: Tensor4<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        self.tape.value(v)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !self.mode.is_train() || rate == 0.0 {
            return Ok(x);
        }
        let rng = self.rng.as_deref_mut().ok_or_else(|| Error::config("train-mode dropout needs a seeded stream"))?;
        let (_, mask) = elementwise::dropout(self.tape.value(x), rate, true, rng)?;
        Ok(self.tape.mask(x, mask.expect("train mode with positive rate yields a mask")))
    }

    /// Runs backward from `loss` and stores each bound parameter's gradient
    /// in its tensor's gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Grads<T> {
        let mut grads = self.tape.backward(loss);
        for (&id, &v) in &self.bound {
            let t = self.store.get_mut(id);
            match grads.take(v) {
                Some(g) => t.set_grad(g.into_data()).expect("gradient has parameter shape"),
                None => t.clear_grad(),
            }
        }
        grads
    }

    /// Makes `id` resolve to an existing tape variable.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    fn running_update(&mut self, bn: &BatchNorm, stats: &norm::BatchStats<T>, count: usize) {
        let momentum = T::lit(norm::BN_MOMENTUM);
        let mut mean = self.store.get(bn.mean).data().to_vec();
        let mut var = self.store.get(bn.var).data().to_vec();
        norm::update_running(&mut mean, &mut var, stats, count, momentum);
        self.store.get_mut(bn.mean).data_mut().copy_from_slice(&mean);
        self.store.get_mut(bn.var).data_mut().copy_from_slice(&var);
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub transposed: bool,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        if self.transposed {
            s.tape.conv_transpose2d(x, w, b, self.spec)
        } else {
            s.tape.conv2d(x, w, b, self.spec)
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let eps = T::lit(norm::BN_EPS);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.tape.batch_norm_train(x, gamma, beta, eps)?;
                let sh = s.tape.shape(x);
                s.running_update(self, &stats, sh.n * sh.plane());
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.store.get(self.mean).data().to_vec();
                let var = s.store.get(self.var).data().to_vec();
                s.tape.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        Ok(s.tape.relu(y))
    }
}

/// Finite-difference check of `f` with respect to `inputs` followed by every
/// trainable tensor of `store`. Each evaluation runs on a fresh copy of the
/// store, so running statistics never leak between evaluations.
pub fn check_session_gradients<F>(store: &ParamStore<f64>, inputs: &[Tensor4<f64>], mode: Mode, mut f: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let weights: Vec<(ParamId, Tensor4<f64>)> = store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == ParamKind::Weight)
        .map(|(i, e)| (ParamId(i), e.value.clone()))
        .collect();
    let mut params = inputs.to_vec();
    params.extend(weights.iter().map(|(_, t)| t.clone()));
    check_gradients(
        |tape, vars| {
            let mut st = store.clone();
            let mut s = Session::new(&mut st, mode);
            std::mem::swap(&mut s.tape, tape);
            for ((id, _), &v) in weights.iter().zip(&vars[inputs.len()..]) {
                s.bind(*id, v);
            }
            let out = f(&mut s, &vars[..inputs.len()]);
            std::mem::swap(&mut s.tape, tape);
            out
        },
        &params,
        cfg,
    )
}

/// Trainable element count of one convolution.
pub fn conv_param_count(in_c: usize, out_c: usize, k: usize, groups: usize, bias: bool) -> usize {
    out_c * (in_c / groups) * k * k + if bias { out_c } else { 0 }
}

/// Trainable element count of one batch norm (gamma and beta).
pub fn bn_param_count(c: usize) -> usize {
    2 * c
}
