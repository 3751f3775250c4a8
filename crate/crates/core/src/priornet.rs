//! The anatomical prior path: a convolutional VAE that reconstructs a
//! fluid-free version of a slice, and the networks that turn an image into a
//! four-level prior feature pyramid for the decoder gates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::conv::ConvSpec;
use crate::diffcore::pool::PoolKind;
use crate::diffcore::tape::{Backward, Tape, Var};
use crate::diffcore::Mode;
use crate::error::{Error, Result};
use crate::nn::{bn_param_count, conv_param_count, Conv, ConvBnRelu, ParamBuilder, ParamStore, Session};
use crate::tensor::{Scalar, Shape, Tensor4};

/// Number of stride-2 stages in both the VAE encoder and the pyramid encoder.
pub const STAGES: usize = 4;

fn check_divisible(op: &'static str, s: Shape) -> Result<()> {
    if s.h % 16 != 0 || s.w % 16 != 0 || s.h == 0 || s.w == 0 {
        return Err(Error::shape(op, format!("spatial dims of {s} must be positive multiples of 16")));
    }
    Ok(())
}

// ---- VAE -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub in_c: usize,
    /// Width of the first encoder stage; stage `k` has `width * 2^k` channels.
    pub width: usize,
    pub latent_dim: usize,
    pub input_size: (usize, usize),
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { in_c: 3, width: 16, latent_dim: 128, input_size: (64, 64) }
    }
}

impl VaeConfig {
    fn deep_c(&self) -> usize {
        self.width << (STAGES - 1)
    }

    fn seed_hw(&self) -> (usize, usize) {
        (self.input_size.0 >> STAGES, self.input_size.1 >> STAGES)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_c == 0 || self.width == 0 || self.latent_dim == 0 {
            return Err(Error::config("vae channels and latent size must be positive"));
        }
        check_divisible("vae", Shape::new(1, self.in_c, self.input_size.0, self.input_size.1)).map_err(|e| Error::config(e.to_string()))
    }

    pub fn param_count(&self) -> usize {
        let (sh, sw) = self.seed_hw();
        let deep = self.deep_c();
        let cbr = |i, o| conv_param_count(i, o, 3, 1, false) + bn_param_count(o);
        let mut n = 0;
        let mut c = self.in_c;
        for k in 0..STAGES {
            n += cbr(c, self.width << k);
            c = self.width << k;
        }
        n += 2 * conv_param_count(deep, self.latent_dim, 1, 1, true);
        n += conv_param_count(self.latent_dim, deep * sh * sw, 1, 1, true);
        let mut c = deep;
        for k in (0..STAGES).rev() {
            let o = self.width << k.saturating_sub(1);
            n += cbr(c, o);
            c = o;
        }
        n + conv_param_count(c, self.in_c, 1, 1, true)
    }
}

/// The VAE reconstructor. Its parameters live in their own store so that
/// they can be frozen and checkpointed separately from the segmentation
/// network.
#[derive(Clone, Debug)]
pub struct PriorModel {
    pub cfg: VaeConfig,
    encoder: Vec<ConvBnRelu>,
    mu_head: Conv,
    logvar_head: Conv,
    seed: Conv,
    decoder: Vec<ConvBnRelu>,
    out: Conv,
}

/// Source of the reparameterization noise.
pub enum Noise<'a> {
    /// `ε = 0`, so `z = μ`.
    Zero,
    Fixed(&'a Tensor4<f32>),
    Sample(&'a mut ChaCha8Rng),
}

#[derive(Clone, Copy, Debug)]
pub struct VaePass {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub recon: Var,
}

impl PriorModel {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<T>, cfg: VaeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::with_capacity(STAGES);
        let mut c = cfg.in_c;
        for k in 0..STAGES {
            let o = cfg.width << k;
            encoder.push(b.scope(&format!("enc{k}")).conv_bn_relu(c, o, 3, ConvSpec::strided3x3(2)));
            c = o;
        }
        let deep = cfg.deep_c();
        let (sh, sw) = cfg.seed_hw();
        let mu_head = b.scope("mu").conv(deep, cfg.latent_dim, 1, ConvSpec::default(), true);
        let logvar_head = b.scope("logvar").conv(deep, cfg.latent_dim, 1, ConvSpec::default(), true);
        let seed = b.scope("seed").conv(cfg.latent_dim, deep * sh * sw, 1, ConvSpec::default(), true);
        let mut decoder = Vec::with_capacity(STAGES);
        let mut c = deep;
        for k in (0..STAGES).rev() {
            let o = cfg.width << k.saturating_sub(1);
            decoder.push(b.scope(&format!("dec{}", STAGES - 1 - k)).conv_bn_relu(c, o, 3, ConvSpec::same3x3()));
            c = o;
        }
        let out = b.scope("out").conv(c, cfg.in_c, 1, ConvSpec::default(), true);
        Ok(PriorModel { cfg, encoder, mu_head, logvar_head, seed, decoder, out })
    }

    /// Builds a model and its parameter store from a seeded stream.
    pub fn init(cfg: VaeConfig, rng: &mut ChaCha8Rng) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let m = PriorModel::build(&mut ParamBuilder::new(&mut store, rng).scope("vae"), cfg)?;
        Ok((m, store))
    }

    /// `(μ, logσ²)`, each shaped `(n, latent_dim, 1, 1)`.
    pub fn encode<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<(Var, Var)> {
        let sh = s.tape.shape(x);
        if sh.c != self.cfg.in_c || (sh.h, sh.w) != self.cfg.input_size {
            return Err(Error::shape(
                "vae_encode",
                format!("input {sh} vs trained shape {}x{}x{}", self.cfg.in_c, self.cfg.input_size.0, self.cfg.input_size.1),
            ));
        }
        let mut h = x;
        for stage in &self.encoder {
            h = stage.forward(s, h)?;
        }
        let g = s.tape.global_avg_pool(h);
        let mu = self.mu_head.forward(s, g)?;
        let logvar = self.logvar_head.forward(s, g)?;
        Ok((mu, logvar))
    }

    pub fn decode<T: Scalar>(&self, s: &mut Session<T>, z: Var) -> Result<Var> {
        let zs = s.tape.shape(z);
        if zs.c != self.cfg.latent_dim || zs.h != 1 || zs.w != 1 {
            return Err(Error::shape("vae_decode", format!("latent {zs} vs {} dims", self.cfg.latent_dim)));
        }
        let (sh, sw) = self.cfg.seed_hw();
        let h = self.seed.forward(s, z)?;
        let h = s.tape.reshape(h, Shape::new(zs.n, self.cfg.deep_c(), sh, sw))?;
        let mut h = s.tape.relu(h);
        for stage in &self.decoder {
            let hs = s.tape.shape(h);
            h = s.tape.resize_bilinear(h, (hs.h * 2, hs.w * 2))?;
            h = stage.forward(s, h)?;
        }
        let y = self.out.forward(s, h)?;
        Ok(s.tape.sigmoid(y))
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, noise: Noise<'_>) -> Result<VaePass> {
        let (mu, logvar) = self.encode(s, x)?;
        let eps = match noise {
            Noise::Zero => Tensor4::zeros(s.tape.shape(mu)),
            Noise::Fixed(e) => e.cast(),
            Noise::Sample(rng) => standard_normal(s.tape.shape(mu), rng),
        };
        let z = reparameterize(&mut s.tape, mu, logvar, eps)?;
        let recon = self.decode(s, z)?;
        Ok(VaePass { mu, logvar, z, recon })
    }

    /// Deterministic reconstruction (`z = μ`) with frozen parameters in eval mode.
    pub fn reconstruct(&self, store: &mut ParamStore<f32>, images: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        let mut s = Session::new(store, Mode::Eval).frozen();
        let x = s.input(images.clone());
        let pass = self.forward(&mut s, x, Noise::Zero)?;
        Ok(s.value(pass.recon).clone())
    }
}

pub fn standard_normal<T: Scalar>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor4<T> {
    Tensor4::from_fn(shape, |_, _, _, _| {
        let e: f64 = rng.sample(StandardNormal);
        T::lit(e)
    })
}

/// `z = μ + ε · exp(½ logσ²)`.
pub fn reparameterize_values<T: Scalar>(mu: &Tensor4<T>, logvar: &Tensor4<T>, eps: &Tensor4<T>) -> Result<Tensor4<T>> {
    if mu.shape() != logvar.shape() || mu.shape() != eps.shape() {
        return Err(Error::shape("reparameterize", format!("mu {}, logvar {}, eps {}", mu.shape(), logvar.shape(), eps.shape())));
    }
    let half = T::lit(0.5);
    Ok(Tensor4::from_fn(mu.shape(), |n, c, y, x| {
        let i = mu.index(n, c, y, x);
        mu.data()[i] + eps.data()[i] * (half * logvar.data()[i]).exp()
    }))
}

struct ReparamOp<T> {
    inputs: [Var; 2],
    eps: Tensor4<T>,
}

impl<T: Scalar> Backward<T> for ReparamOp<T> {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        let lv = tape.value(self.inputs[1]);
        let half = T::lit(0.5);
        let mut dlv = grad.clone();
        for ((d, &l), &e) in dlv.data_mut().iter_mut().zip(lv.data()).zip(self.eps.data()) {
            *d *= e * half * (half * l).exp();
        }
        vec![Some(grad.clone()), Some(dlv)]
    }
}

pub fn reparameterize<T: Scalar>(tape: &mut Tape<T>, mu: Var, logvar: Var, eps: Tensor4<T>) -> Result<Var> {
    let z = reparameterize_values(tape.value(mu), tape.value(logvar), &eps)?;
    Ok(tape.push(z, Box::new(ReparamOp { inputs: [mu, logvar], eps })))
}

/// `KL(N(μ, σ²) ‖ N(0, 1))` summed over latent dimensions and averaged over
/// the batch.
pub fn kl_divergence_values<T: Scalar>(mu: &Tensor4<T>, logvar: &Tensor4<T>) -> T {
    let n = T::from_usize(mu.shape().n.max(1)).unwrap();
    let half = T::lit(0.5);
    let total: T = mu.data().iter().zip(logvar.data()).map(|(&m, &l)| -half * (T::one() + l - m * m - l.exp())).sum();
    total / n
}

struct KlOp {
    inputs: [Var; 2],
}

impl<T: Scalar> Backward<T> for KlOp {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        let (mu, lv) = (tape.value(self.inputs[0]), tape.value(self.inputs[1]));
        let g = grad.data()[0] / T::from_usize(mu.shape().n.max(1)).unwrap();
        let half = T::lit(0.5);
        vec![Some(mu.map(|m| g * m)), Some(lv.map(|l| g * half * (l.exp() - T::one())))]
    }
}

pub fn kl_divergence<T: Scalar>(tape: &mut Tape<T>, mu: Var, logvar: Var) -> Result<Var> {
    let (m, l) = (tape.value(mu), tape.value(logvar));
    if m.shape() != l.shape() {
        return Err(Error::shapes("kl_divergence", "mu vs logvar", m.shape(), l.shape()));
    }
    let v = kl_divergence_values(m, l);
    Ok(tape.push(Tensor4::scalar(v), Box::new(KlOp { inputs: [mu, logvar] })))
}

/// Terms of the VAE objective.
#[derive(Clone, Copy, Debug)]
pub struct VaeLoss {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// `MSE(x, x_rec) + β · KL`.
pub fn vae_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, recon: Var, mu: Var, logvar: Var, beta: f64) -> Result<VaeLoss> {
    let r = tape.mse(x, recon)?;
    let kl = kl_divergence(tape, mu, logvar)?;
    let weighted = tape.scale(kl, T::lit(beta));
    let total = tape.add(r, weighted)?;
    Ok(VaeLoss { total, recon: r, kl })
}

// ---- prior pyramid -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// Pyramid network over the VAE reconstruction.
    #[default]
    VaeRecon,
    /// Pyramid network over the unreconstructed image.
    Raw,
    /// Max-pooled copies of the raw image projected to the level widths.
    Downsample,
    /// A plain residual convolution pyramid over the raw image.
    ResnetLike,
}

impl PriorSource {
    pub const ALL: [PriorSource; 4] = [PriorSource::VaeRecon, PriorSource::Raw, PriorSource::Downsample, PriorSource::ResnetLike];

    pub fn name(self) -> &'static str {
        match self {
            PriorSource::VaeRecon => "vae_recon",
            PriorSource::Raw => "raw",
            PriorSource::Downsample => "downsample",
            PriorSource::ResnetLike => "resnet_like",
        }
    }

    pub fn needs_vae(self) -> bool {
        self == PriorSource::VaeRecon
    }
}

impl std::str::FromStr for PriorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PriorSource::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::config(format!("unknown prior source `{s}`")))
    }
}

/// How each pyramid decoder stage fuses the upsampled and skip features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormNetFusion {
    #[default]
    Conv,
    TransposedConv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormNetConfig {
    pub in_c: usize,
    pub midc: usize,
    pub fusion: NormNetFusion,
    pub source: PriorSource,
}

impl NormNetConfig {
    pub fn new(midc: usize) -> Self {
        NormNetConfig { in_c: 3, midc, fusion: NormNetFusion::Conv, source: PriorSource::VaeRecon }
    }

    /// Encoder stage widths, shallowest first.
    pub fn encoder_channels(&self) -> [usize; STAGES] {
        std::array::from_fn(|k| self.midc << k)
    }

    /// Widths of the four emitted prior maps, deepest first.
    pub fn output_channels(&self) -> [usize; STAGES] {
        [4 * self.midc, 2 * self.midc, self.midc, self.midc]
    }

    /// Downsampling factor of each emitted map, deepest first.
    pub fn output_strides() -> [usize; STAGES] {
        [8, 4, 2, 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.midc == 0 || self.in_c == 0 {
            return Err(Error::config("prior pyramid channels must be positive"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let cbr = |i, o, k| conv_param_count(i, o, k, 1, false) + bn_param_count(o);
        let m = self.midc;
        match self.source {
            PriorSource::VaeRecon | PriorSource::Raw => {
                let enc = self.encoder_channels();
                let mut n = 0;
                let mut c = self.in_c;
                for &o in &enc {
                    n += cbr(c, o, 3);
                    c = o;
                }
                let outs = self.output_channels();
                let skips = [enc[2], enc[1], enc[0], self.in_c];
                let mut c = enc[3];
                for (o, skip) in outs.into_iter().zip(skips) {
                    n += cbr(c + skip, o, 3);
                    c = o;
                }
                n
            }
            PriorSource::Downsample => self.output_channels().iter().map(|&o| cbr(self.in_c, o, 1)).sum(),
            PriorSource::ResnetLike => {
                let res = |c| 2 * cbr(c, c, 3);
                let widths = [m, m, 2 * m, 4 * m];
                let mut n = cbr(self.in_c, m, 3) + res(m);
                for k in 1..STAGES {
                    n += cbr(widths[k - 1], widths[k], 3) + res(widths[k]);
                }
                n
            }
        }
    }
}

/// Two 3x3 conv layers with an identity shortcut.
#[derive(Clone, Debug)]
struct Residual {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

impl Residual {
    fn build<T: Scalar>(b: &mut ParamBuilder<T>, c: usize) -> Self {
        Residual { a: b.scope("a").conv_bn_relu(c, c, 3, ConvSpec::same3x3()), b: b.scope("b").conv_bn_relu(c, c, 3, ConvSpec::same3x3()) }
    }

    fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.a.forward(s, x)?;
        let h = self.b.forward(s, h)?;
        let y = s.tape.add(x, h)?;
        Ok(s.tape.relu(y))
    }
}

#[derive(Clone, Debug)]
enum PyramidBody {
    NormNet { encoder: Vec<ConvBnRelu>, fuse: Vec<FuseStage> },
    Downsample { proj: Vec<ConvBnRelu> },
    ResnetLike { down: Vec<ConvBnRelu>, res: Vec<Residual> },
}

#[derive(Clone, Debug)]
struct FuseStage {
    conv: Conv,
    bn: crate::nn::BatchNorm,
}

/// Builds the four prior maps consumed by the decoder gates.
#[derive(Clone, Debug)]
pub struct PriorPyramid {
    pub cfg: NormNetConfig,
    body: PyramidBody,
}

impl PriorPyramid {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<T>, cfg: NormNetConfig) -> Result<Self> {
        cfg.validate()?;
        let body = match cfg.source {
            PriorSource::VaeRecon | PriorSource::Raw => {
                let enc_c = cfg.encoder_channels();
                let mut encoder = Vec::with_capacity(STAGES);
                let mut c = cfg.in_c;
                for (k, &o) in enc_c.iter().enumerate() {
                    encoder.push(b.scope(&format!("enc{k}")).conv_bn_relu(c, o, 3, ConvSpec::strided3x3(2)));
                    c = o;
                }
                let skips = [enc_c[2], enc_c[1], enc_c[0], cfg.in_c];
                let mut fuse = Vec::with_capacity(STAGES);
                for (k, (o, skip)) in cfg.output_channels().into_iter().zip(skips).enumerate() {
                    let mut sb = b.scope(&format!("dec{k}"));
                    let conv = match cfg.fusion {
                        NormNetFusion::Conv => sb.scope("conv").conv(c + skip, o, 3, ConvSpec::same3x3(), false),
                        NormNetFusion::TransposedConv => sb.scope("convt").conv_transpose(c + skip, o, 3, ConvSpec::same3x3(), false),
                    };
                    let bn = sb.scope("bn").batch_norm(o);
                    fuse.push(FuseStage { conv, bn });
                    c = o;
                }
                PyramidBody::NormNet { encoder, fuse }
            }
            PriorSource::Downsample => PyramidBody::Downsample {
                proj: cfg
                    .output_channels()
                    .iter()
                    .enumerate()
                    .map(|(k, &o)| b.scope(&format!("proj{k}")).conv_bn_relu(cfg.in_c, o, 1, ConvSpec::default()))
                    .collect(),
            },
            PriorSource::ResnetLike => {
                let m = cfg.midc;
                let widths = [m, m, 2 * m, 4 * m];
                let mut down = Vec::with_capacity(STAGES);
                let mut res = Vec::with_capacity(STAGES);
                let mut c = cfg.in_c;
                for (k, &o) in widths.iter().enumerate() {
                    let spec = if k == 0 { ConvSpec::same3x3() } else { ConvSpec::strided3x3(2) };
                    down.push(b.scope(&format!("down{k}")).conv_bn_relu(c, o, 3, spec));
                    res.push(Residual::build(&mut b.scope(&format!("res{k}")), o));
                    c = o;
                }
                PyramidBody::ResnetLike { down, res }
            }
        };
        Ok(PriorPyramid { cfg, body })
    }

    /// Returns the four prior maps, deepest first, at strides 8, 4, 2, 1.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<[Var; STAGES]> {
        let sh = s.tape.shape(x);
        check_divisible("prior_pyramid", sh)?;
        if sh.c != self.cfg.in_c {
            return Err(Error::shape("prior_pyramid", format!("input {sh} vs {} channels", self.cfg.in_c)));
        }
        match &self.body {
            PyramidBody::NormNet { encoder, fuse } => {
                let mut feats = Vec::with_capacity(STAGES);
                let mut h = x;
                for stage in encoder {
                    h = stage.forward(s, h)?;
                    feats.push(h);
                }
                let skips = [feats[2], feats[1], feats[0], x];
                let mut outs = Vec::with_capacity(STAGES);
                for (stage, skip) in fuse.iter().zip(skips) {
                    let ss = s.tape.shape(skip);
                    let up = s.tape.resize_bilinear(h, (ss.h, ss.w))?;
                    let cat = s.tape.concat(&[up, skip])?;
                    let y = stage.conv.forward(s, cat)?;
                    let y = stage.bn.forward(s, y)?;
                    h = s.tape.relu(y);
                    outs.push(h);
                }
                Ok(outs.try_into().expect("one output per stage"))
            }
            PyramidBody::Downsample { proj } => {
                let mut outs = Vec::with_capacity(STAGES);
                for (p, stride) in proj.iter().zip(NormNetConfig::output_strides()) {
                    let mut h = x;
                    for _ in 0..stride.trailing_zeros() {
                        h = s.tape.pool(h, PoolKind::MaxPool2x2)?;
                    }
                    outs.push(p.forward(s, h)?);
                }
                Ok(outs.try_into().expect("one output per stage"))
            }
            PyramidBody::ResnetLike { down, res } => {
                let mut outs = Vec::with_capacity(STAGES);
                let mut h = x;
                for (d, r) in down.iter().zip(res) {
                    h = d.forward(s, h)?;
                    h = r.forward(s, h)?;
                    outs.push(h);
                }
                outs.reverse();
                Ok(outs.try_into().expect("one output per stage"))
            }
        }
    }
}
