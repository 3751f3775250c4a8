//! Full network assembly: dense-block encoder, ASPP bottleneck, gated
//! decoder fed by the prior pyramid, and the output head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{dense_block_param_count, Aspp, AsppConfig, ConvKind, DenseBlock, DenseBlockConfig};
use crate::diffcore::conv::ConvSpec;
use crate::diffcore::pool::PoolKind;
use crate::diffcore::tape::Var;
use crate::diffcore::Mode;
use crate::error::{Error, Result};
use crate::gate::{AttendTarget, Gate, GateConfig, GateVariant, PriorFusion};
use crate::losses::{argmax_mask, LabelMap};
use crate::nn::{bn_param_count, conv_param_count, Conv, ConvBnRelu, ParamBuilder, ParamStore, Session};
use crate::priornet::{NormNetConfig, NormNetFusion, PriorPyramid, PriorSource, STAGES};
use crate::tensor::{Scalar, Shape, Tensor4};

/// Channels of the network input (grayscale replicated to three channels).
pub const INPUT_CHANNELS: usize = 3;

/// Names of the decoder stages, deepest first.
pub const STAGE_NAMES: [&str; STAGES] = ["up6", "up7", "up8", "up9"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    #[default]
    SoftmaxMulticlass,
    SigmoidBinary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// Bilinear x2 followed by a 1x1 channel-halving conv.
    #[default]
    Bilinear,
    /// 2x2 stride-2 transposed conv that halves channels.
    TransposedConv,
}

/// Every architectural choice of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width of the first encoder level; level `l` has `base_c * 2^l`
    /// channels and the bottleneck `base_c * 16`.
    pub base_c: usize,
    /// Layers per dense block.
    pub ratio: usize,
    pub conv_kind: ConvKind,
    pub aspp_enabled: bool,
    pub aspp_rates: Vec<usize>,
    pub aspp_dropout: f64,
    /// `false` replaces every gate by a plain concatenation skip.
    pub gate_enabled: bool,
    pub gate_variant: GateVariant,
    pub prior_fusion: PriorFusion,
    pub attend_target: AttendTarget,
    pub midc: usize,
    pub prior_source: PriorSource,
    pub normnet_fusion: NormNetFusion,
    pub upsample: Upsample,
    pub num_classes: usize,
    pub head: Head,
    pub input_size: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_c: 64,
            ratio: 3,
            conv_kind: ConvKind::DepthwiseSeparable,
            aspp_enabled: true,
            aspp_rates: AsppConfig::DEFAULT_RATES.to_vec(),
            aspp_dropout: 0.5,
            gate_enabled: true,
            gate_variant: GateVariant::Triple,
            prior_fusion: PriorFusion::Add,
            attend_target: AttendTarget::Encoder,
            midc: 32,
            prior_source: PriorSource::VaeRecon,
            normnet_fusion: NormNetFusion::Conv,
            upsample: Upsample::Bilinear,
            num_classes: 4,
            head: Head::SoftmaxMulticlass,
            input_size: [256, 256],
        }
    }
}

impl ModelConfig {
    /// The desk-scale configuration: 64-pixel input, `base_c = 8`, `midc = 8`.
    pub fn desk() -> Self {
        ModelConfig { base_c: 8, midc: 8, input_size: [64, 64], ..ModelConfig::default() }
    }

    pub fn level_channels(&self) -> [usize; STAGES] {
        std::array::from_fn(|l| self.base_c << l)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_c << STAGES
    }

    /// Whether a prior pyramid is built and fed to the gates.
    pub fn uses_prior(&self) -> bool {
        self.gate_enabled && self.gate_variant.uses_prior()
    }

    /// Whether the prior pyramid consumes VAE reconstructions.
    pub fn needs_vae(&self) -> bool {
        self.uses_prior() && self.prior_source.needs_vae()
    }

    pub fn out_channels(&self) -> usize {
        match self.head {
            Head::SoftmaxMulticlass => self.num_classes,
            Head::SigmoidBinary => 1,
        }
    }

    pub fn normnet(&self) -> NormNetConfig {
        NormNetConfig { in_c: INPUT_CHANNELS, midc: self.midc, fusion: self.normnet_fusion, source: self.prior_source }
    }

    pub fn aspp(&self) -> AsppConfig {
        AsppConfig { in_c: self.level_channels()[STAGES - 1], out_c: self.bottleneck_channels(), rates: self.aspp_rates.clone(), dropout_rate: self.aspp_dropout }
    }

    /// Gate configuration of decoder stage `j` (0 = deepest).
    pub fn gate(&self, j: usize) -> GateConfig {
        let enc_c = self.level_channels()[STAGES - 1 - j];
        let prior_c = if self.gate_variant.uses_prior() { self.normnet().output_channels()[j] } else { 0 };
        GateConfig {
            prior_fusion: self.prior_fusion,
            attend_target: self.attend_target,
            variant: self.gate_variant,
            ..GateConfig::new(enc_c, enc_c, prior_c)
        }
    }

    /// Returns every violated invariant at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.base_c == 0 {
            problems.push("base_c must be positive".to_string());
        }
        if !(1..=5).contains(&self.ratio) {
            problems.push(format!("ratio must be in 1..=5, got {}", self.ratio));
        }
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            problems.push(format!("input_size {h}x{w} must be positive multiples of 16"));
        }
        match self.head {
            Head::SoftmaxMulticlass if self.num_classes < 2 => problems.push(format!("softmax head needs num_classes >= 2, got {}", self.num_classes)),
            Head::SigmoidBinary if self.num_classes != 1 => problems.push(format!("sigmoid head needs num_classes == 1, got {}", self.num_classes)),
            _ => {}
        }
        if self.aspp_enabled {
            if let Err(e) = self.aspp().validate() {
                problems.push(e.to_string());
            }
        }
        if self.uses_prior() && self.midc == 0 {
            problems.push("midc must be positive when the prior is used".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Closed-form trainable parameter count, by component.
    pub fn param_breakdown(&self) -> Vec<(&'static str, usize)> {
        let lc = self.level_channels();
        let block = |i, o| dense_block_param_count(&DenseBlockConfig::new(i, o, self.ratio, self.conv_kind)).unwrap_or(0);
        let cbr = |i, o, k| conv_param_count(i, o, k, 1, false) + bn_param_count(o);
        let mut encoder = 0;
        let mut c = INPUT_CHANNELS;
        for &o in &lc {
            encoder += block(c, o);
            c = o;
        }
        let bc = self.bottleneck_channels();
        let bottleneck = if self.aspp_enabled { self.aspp().param_count() } else { cbr(lc[STAGES - 1], bc, 3) + cbr(bc, bc, 3) };
        let mut upsample = 0;
        let mut gates = 0;
        let mut decoder = 0;
        let mut c = bc;
        for j in 0..STAGES {
            let enc_c = lc[STAGES - 1 - j];
            upsample += match self.upsample {
                Upsample::Bilinear => cbr(c, enc_c, 1),
                Upsample::TransposedConv => cbr(c, enc_c, 2),
            };
            if self.gate_enabled {
                gates += self.gate(j).param_count();
            }
            decoder += block(2 * enc_c, enc_c);
            c = enc_c;
        }
        let head = conv_param_count(lc[0], self.out_channels(), 1, 1, true);
        let prior = if self.uses_prior() { self.normnet().param_count() } else { 0 };
        vec![
            ("encoder", encoder),
            ("bottleneck", bottleneck),
            ("upsample", upsample),
            ("gates", gates),
            ("decoder", decoder),
            ("head", head),
            ("prior", prior),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_breakdown().iter().map(|(_, n)| n).sum()
    }
}

#[derive(Clone, Debug)]
enum Bottleneck {
    Aspp(Aspp),
    Plain(ConvBnRelu, ConvBnRelu),
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvBnRelu,
    gate: Option<Gate>,
    block: DenseBlock,
}

/// Network structure; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SegModel {
    pub cfg: ModelConfig,
    encoder: Vec<DenseBlock>,
    bottleneck: Bottleneck,
    decoder: Vec<DecoderStage>,
    head: Conv,
    prior: Option<PriorPyramid>,
}

/// One decoder stage's captured values.
#[derive(Clone, Copy, Debug)]
pub struct StageTap {
    pub name: &'static str,
    /// Attention map, absent when gates are disabled.
    pub alpha: Option<Var>,
    /// Output of the stage's dense block.
    pub fused: Var,
}

/// Intermediate values exposed for heatmap export.
#[derive(Clone, Debug)]
pub struct HeatmapBundle {
    pub aspp: Var,
    pub stages: Vec<StageTap>,
}

impl HeatmapBundle {
    /// `(name, spatial size)` of each tap, bottleneck first.
    pub fn schedule<T: Scalar>(&self, s: &Session<T>) -> Vec<(&'static str, (usize, usize))> {
        let hw = |v: Var| {
            let sh = s.tape.shape(v);
            (sh.h, sh.w)
        };
        let mut out = vec![("aspp", hw(self.aspp))];
        out.extend(self.stages.iter().map(|t| (t.name, hw(t.fused))));
        out
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Softmax probabilities `(n, num_classes, h, w)` or sigmoid
    /// probabilities `(n, 1, h, w)`.
    pub probs: Var,
    pub taps: HeatmapBundle,
}

impl SegModel {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<T>, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let lc = cfg.level_channels();
        let mut encoder = Vec::with_capacity(STAGES);
        let mut c = INPUT_CHANNELS;
        for (l, &o) in lc.iter().enumerate() {
            encoder.push(DenseBlock::build(&mut b.scope(&format!("encoder.level{l}")), DenseBlockConfig::new(c, o, cfg.ratio, cfg.conv_kind))?);
            c = o;
        }
        let bc = cfg.bottleneck_channels();
        let bottleneck = if cfg.aspp_enabled {
            Bottleneck::Aspp(Aspp::build(&mut b.scope("bottleneck.aspp"), cfg.aspp())?)
        } else {
            let mut bb = b.scope("bottleneck.plain");
            let first = bb.scope("conv0").conv_bn_relu(c, bc, 3, ConvSpec::same3x3());
            let second = bb.scope("conv1").conv_bn_relu(bc, bc, 3, ConvSpec::same3x3());
            Bottleneck::Plain(first, second)
        };
        let mut decoder = Vec::with_capacity(STAGES);
        let mut c = bc;
        for (j, name) in STAGE_NAMES.iter().enumerate() {
            let enc_c = lc[STAGES - 1 - j];
            let up = match cfg.upsample {
                Upsample::Bilinear => b.scope(&format!("upsample.{name}")).conv_bn_relu(c, enc_c, 1, ConvSpec::default()),
                Upsample::TransposedConv => {
                    let mut ub = b.scope(&format!("upsample.{name}"));
                    let conv = ub.scope("conv").conv_transpose(c, enc_c, 2, ConvSpec { stride: 2, ..ConvSpec::default() }, false);
                    let bn = ub.scope("bn").batch_norm(enc_c);
                    ConvBnRelu { conv, bn }
                }
            };
            let gate = if cfg.gate_enabled { Some(Gate::build(&mut b.scope(&format!("gates.{name}")), cfg.gate(j))?) } else { None };
            let block = DenseBlock::build(&mut b.scope(&format!("decoder.{name}")), DenseBlockConfig::new(2 * enc_c, enc_c, cfg.ratio, cfg.conv_kind))?;
            decoder.push(DecoderStage { up, gate, block });
            c = enc_c;
        }
        let head = b.scope("head").conv(lc[0], cfg.out_channels(), 1, ConvSpec::default(), true);
        let prior = if cfg.uses_prior() { Some(PriorPyramid::build(&mut b.scope("prior"), cfg.normnet())?) } else { None };
        Ok(SegModel { cfg, encoder, bottleneck, decoder, head, prior })
    }

    /// Builds the network and its parameters from a seeded stream.
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let m = SegModel::build(&mut ParamBuilder::new(&mut store, rng), cfg)?;
        Ok((m, store))
    }

    /// Whether [`SegModel::forward`] needs a prior input image.
    pub fn needs_prior_input(&self) -> bool {
        self.prior.is_some()
    }

    /// Whether the prior input must be the VAE reconstruction rather than the image.
    pub fn needs_reconstruction(&self) -> bool {
        self.prior.is_some() && self.cfg.prior_source.needs_vae()
    }

    pub fn head_conv(&self) -> &Conv {
        &self.head
    }

    /// Runs the network. `prior_input` is the image the prior pyramid
    /// consumes (the VAE reconstruction for the default source, else the
    /// image itself); it is ignored when no prior is configured.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, image: Var, prior_input: Option<Var>) -> Result<ForwardOutput> {
        let sh = s.tape.shape(image);
        let [h, w] = self.cfg.input_size;
        if sh.c != INPUT_CHANNELS || (sh.h, sh.w) != (h, w) {
            return Err(Error::shape("forward", format!("image {sh} vs configured {}x{h}x{w}", INPUT_CHANNELS)));
        }
        let priors = match &self.prior {
            Some(p) => {
                let pin = prior_input.unwrap_or(image);
                let ps = s.tape.shape(pin);
                if ps != sh {
                    return Err(Error::shapes("forward", "prior input vs image", ps, sh));
                }
                Some(p.forward(s, pin)?)
            }
            None => None,
        };

        let mut skips = Vec::with_capacity(STAGES);
        let mut x = image;
        for block in &self.encoder {
            let f = block.forward(s, x)?;
            skips.push(f);
            x = s.tape.pool(f, PoolKind::MaxPool2x2)?;
        }
        let bottom = match &self.bottleneck {
            Bottleneck::Aspp(a) => a.forward(s, x)?,
            Bottleneck::Plain(a, b) => {
                let y = a.forward(s, x)?;
                b.forward(s, y)?
            }
        };

        let mut stages = Vec::with_capacity(STAGES);
        let mut d = bottom;
        for (j, stage) in self.decoder.iter().enumerate() {
            let skip = skips[STAGES - 1 - j];
            let ss = s.tape.shape(skip);
            let up = match self.cfg.upsample {
                Upsample::Bilinear => {
                    let r = s.tape.resize_bilinear(d, (ss.h, ss.w))?;
                    stage.up.forward(s, r)?
                }
                Upsample::TransposedConv => stage.up.forward(s, d)?,
            };
            let (merged, alpha) = match &stage.gate {
                Some(g) => {
                    let prior = match &priors {
                        Some(ps) => {
                            let ps_shape = s.tape.shape(ps[j]);
                            if (ps_shape.h, ps_shape.w) == (ss.h, ss.w) {
                                ps[j]
                            } else {
                                s.tape.resize_bilinear(ps[j], (ss.h, ss.w))?
                            }
                        }
                        None => up,
                    };
                    let o = g.forward(s, skip, up, prior)?;
                    (s.tape.concat(&[o.attended, up])?, Some(o.alpha))
                }
                None => (s.tape.concat(&[skip, up])?, None),
            };
            d = stage.block.forward(s, merged)?;
            stages.push(StageTap { name: STAGE_NAMES[j], alpha, fused: d });
        }

        let logits = self.head.forward(s, d)?;
        let probs = match self.cfg.head {
            Head::SoftmaxMulticlass => s.tape.softmax_channels(logits),
            Head::SigmoidBinary => s.tape.sigmoid(logits),
        };
        Ok(ForwardOutput { probs, taps: HeatmapBundle { aspp: bottom, stages } })
    }

    /// Per-pixel class probabilities on the simplex: the softmax output, or
    /// `[1 − p, p]` for the sigmoid head.
    pub fn class_probs<T: Scalar>(&self, s: &mut Session<T>, probs: Var) -> Result<Var> {
        match self.cfg.head {
            Head::SoftmaxMulticlass => Ok(probs),
            Head::SigmoidBinary => {
                let ones = s.input(Tensor4::ones(s.tape.shape(probs)));
                let bg = s.tape.sub(ones, probs)?;
                s.tape.concat(&[bg, probs])
            }
        }
    }

    /// Exact element count of the trainable tensors in `store`.
    pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> usize {
        store.count_trainable()
    }

    /// Eval-mode argmax prediction.
    pub fn predict_mask(&self, store: &mut ParamStore<f32>, images: &Tensor4<f32>, prior_input: Option<&Tensor4<f32>>) -> Result<LabelMap> {
        let mut s = Session::new(store, Mode::Eval).frozen();
        let x = s.input(images.clone());
        let p = prior_input.map(|t| s.input(t.clone()));
        let out = self.forward(&mut s, x, p)?;
        let probs = self.class_probs(&mut s, out.probs)?;
        Ok(argmax_mask(s.value(probs)))
    }
}

/// Shape the network input must have for a batch of `n`.
pub fn input_shape(cfg: &ModelConfig, n: usize) -> Shape {
    Shape::new(n, INPUT_CHANNELS, cfg.input_size[0], cfg.input_size[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::GradCheckConfig;
    use crate::losses::{combined_loss_on_tape, LossWeights};
    use crate::nn::check_session_gradients;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn image<T: Scalar>(n: usize, hw: usize, seed: u64) -> Tensor4<T> {
        let mut r = rng(seed);
        Tensor4::from_fn([n, 3, hw, hw], |_, _, _, _| T::lit(r.random_range(0.0..1.0)))
    }

    fn small(hw: usize) -> ModelConfig {
        ModelConfig { base_c: 4, midc: 2, input_size: [hw, hw], ..ModelConfig::default() }
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = SegModel::init(ModelConfig::desk(), &mut rng(1)).unwrap();
        let (_, b) = SegModel::init(ModelConfig::desk(), &mut rng(1)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value.data(), y.value.data());
        }
    }

    #[test]
    fn desk_forward_shapes_and_taps() {
        let cfg = ModelConfig::desk();
        let (m, mut store) = SegModel::init(cfg.clone(), &mut rng(2)).unwrap();
        let mut drop = rng(3);
        let mut s = Session::new(&mut store, Mode::Train).with_rng(&mut drop);
        let x = s.input(image(2, 64, 4));
        let out = m.forward(&mut s, x, None).unwrap();
        let p = s.value(out.probs);
        assert_eq!(p.shape(), Shape::new(2, 4, 64, 64));
        for n in 0..2 {
            for i in 0..64 * 64 {
                let sum: f32 = (0..4).map(|c| p.plane(n, c)[i]).sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
        }
        let sched: Vec<usize> = out.taps.schedule(&s).iter().map(|(_, (h, _))| *h).collect();
        assert_eq!(sched, vec![4, 8, 16, 32, 64]);
        for t in &out.taps.stages {
            assert!(s.value(t.alpha.unwrap()).data().iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }

    #[test]
    fn plain_bottleneck_replaces_aspp() {
        let cfg = ModelConfig { aspp_enabled: false, ..small(32) };
        let (m, mut store) = SegModel::init(cfg.clone(), &mut rng(5)).unwrap();
        assert!(store.find("bottleneck.plain.conv1.conv.weight").is_some());
        assert!(store.entries().iter().all(|e| !e.name.contains("aspp")));
        assert_eq!(store.count_trainable(), cfg.param_count());
        let mut s = Session::new(&mut store, Mode::Eval);
        let x = s.input(image(1, 32, 6));
        let out = m.forward(&mut s, x, None).unwrap();
        assert_eq!(s.tape.shape(out.probs), Shape::new(1, 4, 32, 32));
    }

    #[test]
    fn invalid_configs_enumerate_problems() {
        let cfg = ModelConfig { ratio: 0, input_size: [30, 32], num_classes: 1, ..ModelConfig::desk() };
        let msg = SegModel::init(cfg, &mut rng(0)).unwrap_err().to_string();
        assert!(msg.contains("ratio") && msg.contains("input_size") && msg.contains("num_classes"), "{msg}");
    }

    #[test]
    fn eval_forward_is_pure() {
        let (m, mut store) = SegModel::init(small(32), &mut rng(7)).unwrap();
        let x = image::<f32>(1, 32, 8);
        let a = m.predict_mask(&mut store, &x, None).unwrap();
        let b = m.predict_mask(&mut store, &x, None).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| v < 4));
    }

    #[test]
    fn forced_head_emits_chosen_class() {
        let (m, mut store) = SegModel::init(small(32), &mut rng(9)).unwrap();
        let head = m.head_conv().clone();
        store.get_mut(head.weight).data_mut().fill(0.0);
        store.get_mut(head.bias.unwrap()).data_mut().copy_from_slice(&[0.0, 0.0, 5.0, 0.0]);
        let mask = m.predict_mask(&mut store, &image(2, 32, 10), None).unwrap();
        assert!(mask.data().iter().all(|&v| v == 2));
        // Uniform logits tie-break to background.
        store.get_mut(head.bias.unwrap()).data_mut().fill(0.0);
        let mask = m.predict_mask(&mut store, &image(1, 32, 11), None).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn sigmoid_head_binary_mode() {
        let cfg = ModelConfig { head: Head::SigmoidBinary, num_classes: 1, ..small(32) };
        let (m, mut store) = SegModel::init(cfg, &mut rng(12)).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval);
        let x = s.input(image(1, 32, 13));
        let out = m.forward(&mut s, x, None).unwrap();
        assert_eq!(s.tape.shape(out.probs).c, 1);
        let cp = m.class_probs(&mut s, out.probs).unwrap();
        assert_eq!(s.tape.shape(cp).c, 2);
    }

    #[test]
    fn param_count_matches_closed_form_across_configs() {
        let mut r = rng(14);
        for _ in 0..10 {
            let cfg = ModelConfig {
                base_c: r.random_range(1..5),
                ratio: r.random_range(1..4),
                conv_kind: if r.random_bool(0.5) { ConvKind::Standard } else { ConvKind::DepthwiseSeparable },
                aspp_enabled: r.random_bool(0.7),
                gate_enabled: r.random_bool(0.8),
                gate_variant: GateVariant::ALL[r.random_range(0..6)],
                midc: r.random_range(1..4),
                prior_source: PriorSource::ALL[r.random_range(0..4)],
                upsample: if r.random_bool(0.5) { Upsample::Bilinear } else { Upsample::TransposedConv },
                input_size: [32, 32],
                ..ModelConfig::default()
            };
            let (_, store) = SegModel::init(cfg.clone(), &mut rng(15)).unwrap();
            assert_eq!(store.count_trainable(), cfg.param_count(), "{cfg:?}");
            for (component, n) in cfg.param_breakdown() {
                assert_eq!(store.count_prefix(component), n, "{component} in {cfg:?}");
            }
        }
    }

    #[test]
    fn width_doubling_roughly_quadruples_params() {
        let cfg = |base_c| ModelConfig { base_c, conv_kind: ConvKind::Standard, gate_variant: GateVariant::DualNoPrior, ..ModelConfig::default() };
        let ratio = cfg(32).param_count() as f64 / cfg(16).param_count() as f64;
        assert!((3.9..4.01).contains(&ratio), "{ratio}");
        // Depthwise terms grow linearly, so the default stays below that.
        let sep = ModelConfig { base_c: 32, ..ModelConfig::default() }.param_count() as f64 / ModelConfig { base_c: 16, ..ModelConfig::default() }.param_count() as f64;
        assert!((2.0..4.0).contains(&sep), "{sep}");
    }

    #[test]
    fn ablation_toggles_touch_only_their_component() {
        let base = ModelConfig::desk();
        let full: std::collections::HashMap<_, _> = base.param_breakdown().into_iter().collect();
        let toggles: Vec<(ModelConfig, &[&str])> = vec![
            (ModelConfig { aspp_enabled: false, ..base.clone() }, &["bottleneck"]),
            (ModelConfig { gate_enabled: false, ..base.clone() }, &["gates", "prior"]),
            (ModelConfig { gate_variant: GateVariant::DualNoPrior, ..base.clone() }, &["gates", "prior"]),
            (ModelConfig { midc: 4, ..base.clone() }, &["gates", "prior"]),
            (ModelConfig { conv_kind: ConvKind::Standard, ..base.clone() }, &["encoder", "decoder"]),
        ];
        for (cfg, changed) in toggles {
            for (component, n) in cfg.param_breakdown() {
                if !changed.contains(&component) {
                    assert_eq!(n, full[component], "{component}");
                }
            }
        }
        assert!(ModelConfig { gate_variant: GateVariant::DualNoPrior, ..base.clone() }.param_count() < base.param_count());
    }

    #[test]
    fn end_to_end_gradient_check() {
        let cfg = ModelConfig { aspp_dropout: 0.0, ..small(32) };
        let mut store = ParamStore::<f64>::new();
        let m = SegModel::build(&mut ParamBuilder::new(&mut store, &mut rng(16)), cfg).unwrap();
        let gt = {
            let mut r = rng(17);
            LabelMap::new(1, 32, 32, (0..32 * 32).map(|_| r.random_range(0..4u8)).collect()).unwrap()
        };
        let r = check_session_gradients(
            &store,
            &[image(1, 32, 18)],
            Mode::Train,
            |s, v| {
                let out = m.forward(s, v[0], None)?;
                combined_loss_on_tape(&mut s.tape, out.probs, &gt, &LossWeights::default())
            },
            &GradCheckConfig { max_elements: Some(100), tol: 1e-3, ..Default::default() },
        );
        assert!(r.passed, "{r:?}");
    }
}
