//! Attention gates fusing encoder skip features, upsampled decoder features
//! and the anatomical prior, plus the ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::conv::ConvSpec;
use crate::diffcore::tape::Var;
use crate::error::{Error, Result};
use crate::nn::{bn_param_count, conv_param_count, BatchNorm, Conv, ParamBuilder, Session};
use crate::tensor::Scalar;

/// Kernel size of the spatial-attention convolution over mean/max maps.
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorFusion {
    #[default]
    Add,
    Subtract,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttendTarget {
    #[default]
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    #[default]
    Triple,
    DualNoPrior,
    ConcatAttention,
    SpatialOnly,
    ChannelOnly,
    CbamLike,
}

impl GateVariant {
    pub const ALL: [GateVariant; 6] = [
        GateVariant::Triple,
        GateVariant::DualNoPrior,
        GateVariant::ConcatAttention,
        GateVariant::SpatialOnly,
        GateVariant::ChannelOnly,
        GateVariant::CbamLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateVariant::Triple => "triple",
            GateVariant::DualNoPrior => "dual_no_prior",
            GateVariant::ConcatAttention => "concat_attention",
            GateVariant::SpatialOnly => "spatial_only",
            GateVariant::ChannelOnly => "channel_only",
            GateVariant::CbamLike => "cbam_like",
        }
    }

    pub fn uses_prior(self) -> bool {
        self != GateVariant::DualNoPrior
    }
}

impl fmt::Display for GateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GateVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown gate variant `{s}` (expected one of triple, dual_no_prior, concat_attention, spatial_only, channel_only, cbam_like)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateConfig {
    pub enc_c: usize,
    pub dec_c: usize,
    pub prior_c: usize,
    pub inter_c: usize,
    pub prior_fusion: PriorFusion,
    pub attend_target: AttendTarget,
    pub variant: GateVariant,
}

impl GateConfig {
    /// Triple gate with `inter_c = enc_c / 2` (at least 1).
    pub fn new(enc_c: usize, dec_c: usize, prior_c: usize) -> Self {
        GateConfig {
            enc_c,
            dec_c,
            prior_c,
            inter_c: (enc_c / 2).max(1),
            prior_fusion: PriorFusion::Add,
            attend_target: AttendTarget::Encoder,
            variant: GateVariant::Triple,
        }
    }

    pub fn target_c(&self) -> usize {
        match self.attend_target {
            AttendTarget::Encoder => self.enc_c,
            AttendTarget::Decoder => self.dec_c,
        }
    }

    fn concat_c(&self) -> usize {
        self.enc_c + self.dec_c + if self.variant.uses_prior() { self.prior_c } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inter_c == 0 || self.enc_c == 0 || self.dec_c == 0 {
            return Err(Error::config("gate channels must be positive"));
        }
        if self.variant.uses_prior() && self.prior_c == 0 {
            return Err(Error::config(format!("gate variant {} needs prior channels", self.variant)));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let proj = |c: usize| conv_param_count(c, self.inter_c, 1, 1, false) + bn_param_count(self.inter_c);
        let psi = conv_param_count(self.inter_c, 1, 1, 1, true);
        let spatial = conv_param_count(2, 1, SPATIAL_KERNEL, 1, true);
        let mlp = conv_param_count(self.concat_c(), self.inter_c, 1, 1, true) + conv_param_count(self.inter_c, self.target_c(), 1, 1, true);
        match self.variant {
            GateVariant::Triple => proj(self.enc_c) + proj(self.dec_c) + proj(self.prior_c) + psi,
            GateVariant::DualNoPrior => proj(self.enc_c) + proj(self.dec_c) + psi,
            GateVariant::ConcatAttention => {
                proj(self.enc_c) + proj(self.dec_c) + proj(self.prior_c) + conv_param_count(3 * self.inter_c, self.inter_c, 1, 1, true) + psi
            }
            GateVariant::SpatialOnly => spatial,
            GateVariant::ChannelOnly => mlp,
            GateVariant::CbamLike => mlp + spatial,
        }
    }
}

/// 1x1 convolution (no bias) followed by batch norm.
#[derive(Clone, Debug)]
pub struct Projection {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl Projection {
    fn build<T: Scalar>(b: &mut ParamBuilder<T>, in_c: usize, out_c: usize) -> Self {
        Projection { conv: b.scope("conv").conv(in_c, out_c, 1, ConvSpec::default(), false), bn: b.scope("bn").batch_norm(out_c) }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        self.bn.forward(s, y)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Additive { enc: Projection, dec: Projection, prior: Option<Projection>, psi: Conv },
    Concat { enc: Projection, dec: Projection, prior: Projection, hidden: Conv, psi: Conv },
    Spatial { conv: Conv },
    Channel { hidden: Conv, out: Conv },
    Cbam { hidden: Conv, out: Conv, spatial: Conv },
}

#[derive(Clone, Debug)]
pub struct Gate {
    pub cfg: GateConfig,
    body: Body,
}

/// Gate output: attended features and the attention map.
#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub attended: Var,
    pub alpha: Var,
}

impl Gate {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<T>, cfg: GateConfig) -> Result<Self> {
        cfg.validate()?;
        let ic = cfg.inter_c;
        let one = ConvSpec::default();
        let spatial_spec = ConvSpec { padding: SPATIAL_KERNEL / 2, ..ConvSpec::default() };
        let body = match cfg.variant {
            GateVariant::Triple | GateVariant::DualNoPrior => Body::Additive {
                enc: Projection::build(&mut b.scope("enc"), cfg.enc_c, ic),
                dec: Projection::build(&mut b.scope("dec"), cfg.dec_c, ic),
                prior: cfg.variant.uses_prior().then(|| Projection::build(&mut b.scope("prior"), cfg.prior_c, ic)),
                psi: b.scope("psi").conv(ic, 1, 1, one, true),
            },
            GateVariant::ConcatAttention => Body::Concat {
                enc: Projection::build(&mut b.scope("enc"), cfg.enc_c, ic),
                dec: Projection::build(&mut b.scope("dec"), cfg.dec_c, ic),
                prior: Projection::build(&mut b.scope("prior"), cfg.prior_c, ic),
                hidden: b.scope("hidden").conv(3 * ic, ic, 1, one, true),
                psi: b.scope("psi").conv(ic, 1, 1, one, true),
            },
            GateVariant::SpatialOnly => Body::Spatial { conv: b.scope("spatial").conv(2, 1, SPATIAL_KERNEL, spatial_spec, true) },
            GateVariant::ChannelOnly => Body::Channel {
                hidden: b.scope("mlp_hidden").conv(cfg.concat_c(), ic, 1, one, true),
                out: b.scope("mlp_out").conv(ic, cfg.target_c(), 1, one, true),
            },
            GateVariant::CbamLike => Body::Cbam {
                hidden: b.scope("mlp_hidden").conv(cfg.concat_c(), ic, 1, one, true),
                out: b.scope("mlp_out").conv(ic, cfg.target_c(), 1, one, true),
                spatial: b.scope("spatial").conv(2, 1, SPATIAL_KERNEL, spatial_spec, true),
            },
        };
        Ok(Gate { cfg, body })
    }

    /// The ψ convolution producing the pre-sigmoid attention logit, when the
    /// variant has one.
    pub fn psi_conv(&self) -> Option<&Conv> {
        match &self.body {
            Body::Additive { psi, .. } | Body::Concat { psi, .. } => Some(psi),
            _ => None,
        }
    }

    /// The prior projection of the additive variants.
    pub fn prior_projection(&self) -> Option<&Projection> {
        match &self.body {
            Body::Additive { prior, .. } => prior.as_ref(),
            Body::Concat { prior, .. } => Some(prior),
            _ => None,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, enc: Var, dec: Var, prior: Var) -> Result<GateOutput> {
        self.check_inputs(s, enc, dec, prior)?;
        let target = match self.cfg.attend_target {
            AttendTarget::Encoder => enc,
            AttendTarget::Decoder => dec,
        };
        let uses_prior = self.cfg.variant.uses_prior();
        let sources = |s: &mut Session<T>| -> Result<Var> {
            if uses_prior {
                s.tape.concat(&[enc, dec, prior])
            } else {
                s.tape.concat(&[enc, dec])
            }
        };
        match &self.body {
            Body::Additive { enc: pe, dec: pd, prior: pp, psi } => {
                let x1 = pe.forward(s, enc)?;
                let x2 = pd.forward(s, dec)?;
                let mut sum = s.tape.add(x1, x2)?;
                if let Some(pp) = pp {
                    let x3 = pp.forward(s, prior)?;
                    sum = match self.cfg.prior_fusion {
                        PriorFusion::Add => s.tape.add(sum, x3)?,
                        PriorFusion::Subtract => s.tape.sub(sum, x3)?,
                    };
                }
                let psi_map = s.tape.relu(sum);
                let logit = psi.forward(s, psi_map)?;
                let alpha = s.tape.sigmoid(logit);
                let attended = s.tape.mul(target, alpha)?;
                Ok(GateOutput { attended, alpha })
            }
            Body::Concat { enc: pe, dec: pd, prior: pp, hidden, psi } => {
                let x1 = pe.forward(s, enc)?;
                let x2 = pd.forward(s, dec)?;
                let x3 = pp.forward(s, prior)?;
                let cat = s.tape.concat(&[x1, x2, x3])?;
                let h = hidden.forward(s, cat)?;
                let h = s.tape.relu(h);
                let logit = psi.forward(s, h)?;
                let alpha = s.tape.sigmoid(logit);
                let attended = s.tape.mul(target, alpha)?;
                Ok(GateOutput { attended, alpha })
            }
            Body::Spatial { conv } => {
                let cat = sources(s)?;
                let stats = s.tape.channel_mean_max(cat);
                let logit = conv.forward(s, stats)?;
                let alpha = s.tape.sigmoid(logit);
                let attended = s.tape.mul(target, alpha)?;
                Ok(GateOutput { attended, alpha })
            }
            Body::Channel { hidden, out } => {
                let cat = sources(s)?;
                let pooled = s.tape.global_avg_pool(cat);
                let h = hidden.forward(s, pooled)?;
                let h = s.tape.relu(h);
                let logit = out.forward(s, h)?;
                let alpha = s.tape.sigmoid(logit);
                let attended = s.tape.mul(target, alpha)?;
                Ok(GateOutput { attended, alpha })
            }
            Body::Cbam { hidden, out, spatial } => {
                // Channel attention from a shared MLP over average- and
                // max-pooled descriptors, then spatial attention on the
                // channel-refined target.
                let cat = sources(s)?;
                let avg = s.tape.global_avg_pool(cat);
                let max = s.tape.pool(cat, crate::diffcore::PoolKind::GlobalMax)?;
                let mut logits = Vec::with_capacity(2);
                for d in [avg, max] {
                    let h = hidden.forward(s, d)?;
                    let h = s.tape.relu(h);
                    logits.push(out.forward(s, h)?);
                }
                let channel_logit = s.tape.add(logits[0], logits[1])?;
                let alpha_c = s.tape.sigmoid(channel_logit);
                let refined = s.tape.mul(target, alpha_c)?;
                let stats = s.tape.channel_mean_max(refined);
                let logit = spatial.forward(s, stats)?;
                let alpha = s.tape.sigmoid(logit);
                let attended = s.tape.mul(refined, alpha)?;
                Ok(GateOutput { attended, alpha })
            }
        }
    }

    fn check_inputs<T: Scalar>(&self, s: &Session<T>, enc: Var, dec: Var, prior: Var) -> Result<()> {
        let (se, sd, sp) = (s.tape.shape(enc), s.tape.shape(dec), s.tape.shape(prior));
        let prior_ok = !self.cfg.variant.uses_prior() || (sp.n == se.n && sp.h == se.h && sp.w == se.w && sp.c == self.cfg.prior_c);
        if se.c != self.cfg.enc_c || sd.c != self.cfg.dec_c || sd.n != se.n || sd.h != se.h || sd.w != se.w || !prior_ok {
            return Err(Error::shape(
                "attention_gate",
                format!(
                    "encoder {se}, decoder {sd}, prior {sp} (expected channels {}/{}/{} on a shared grid)",
                    self.cfg.enc_c, self.cfg.dec_c, self.cfg.prior_c
                ),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{GradCheckConfig, Mode};
    use crate::nn::{check_session_gradients, ParamStore};
    use crate::tensor::Tensor4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random<T: Scalar>(shape: [usize; 4], seed: u64) -> Tensor4<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_, _, _, _| T::lit(rng.random_range(-1.0..1.0)))
    }

    fn build(cfg: GateConfig, seed: u64) -> (ParamStore<f32>, Gate) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Gate::build(&mut ParamBuilder::new(&mut store, &mut rng), cfg).unwrap();
        (store, g)
    }

    fn run(store: &mut ParamStore<f32>, g: &Gate, e: &Tensor4<f32>, d: &Tensor4<f32>, p: &Tensor4<f32>, mode: Mode) -> (Tensor4<f32>, Tensor4<f32>) {
        let mut s = Session::new(store, mode);
        let (e, d, p) = (s.input(e.clone()), s.input(d.clone()), s.input(p.clone()));
        let o = g.forward(&mut s, e, d, p).unwrap();
        (s.value(o.attended).clone(), s.value(o.alpha).clone())
    }

    #[test]
    fn zero_prior_matches_dual_gate() {
        let cfg = GateConfig::new(4, 4, 3);
        let (mut store, g) = build(cfg, 1);
        let (e, d) = (random([1, 4, 8, 8], 2), random([1, 4, 8, 8], 3));
        let zero = Tensor4::zeros([1, 3, 8, 8]);
        let (att, _) = run(&mut store, &g, &e, &d, &zero, Mode::Eval);

        // Dual path composed directly from the same projections.
        let Body::Additive { enc, dec, psi, .. } = &g.body else { panic!() };
        let mut s = Session::new(&mut store, Mode::Eval);
        let (ev, dv) = (s.input(e), s.input(d));
        let x1 = enc.forward(&mut s, ev).unwrap();
        let x2 = dec.forward(&mut s, dv).unwrap();
        let sum = s.tape.add(x1, x2).unwrap();
        let psi_map = s.tape.relu(sum);
        let logit = psi.forward(&mut s, psi_map).unwrap();
        let a = s.tape.sigmoid(logit);
        let oracle = s.tape.mul(ev, a).unwrap();
        assert_eq!(att.max_abs_diff(s.value(oracle)), 0.0);
    }

    #[test]
    fn saturated_psi_bias_closes_gate() {
        let (mut store, g) = build(GateConfig::new(4, 4, 4), 4);
        let psi = g.psi_conv().unwrap().clone();
        store.get_mut(psi.weight).data_mut().fill(0.0);
        store.get_mut(psi.bias.unwrap()).data_mut().fill(-10.0);
        let (e, d, p) = (random([1, 4, 6, 6], 5), random([1, 4, 6, 6], 6), random([1, 4, 6, 6], 7));
        let (att, alpha) = run(&mut store, &g, &e, &d, &p, Mode::Train);
        let expect = 1.0 / (1.0 + 10f64.exp());
        assert!(alpha.data().iter().all(|&a| (a as f64 - expect).abs() < 1e-7));
        assert!(att.data().iter().all(|&v| v.abs() < 1e-4));
    }

    #[test]
    fn alpha_in_unit_interval_over_seeds() {
        for seed in 0..100 {
            let (mut store, g) = build(GateConfig::new(4, 4, 2), seed);
            let scale = 1.0 + (seed % 7) as f32 * 3.0;
            let e = random::<f32>([1, 4, 4, 4], seed + 1000).map(|v| v * scale);
            let d = random::<f32>([1, 4, 4, 4], seed + 2000).map(|v| v * scale);
            let p = random::<f32>([1, 2, 4, 4], seed + 3000).map(|v| v * scale);
            let (_, alpha) = run(&mut store, &g, &e, &d, &p, Mode::Train);
            assert!(alpha.data().iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }

    #[test]
    fn subtract_equals_add_with_negated_projection() {
        let mut cfg = GateConfig::new(4, 4, 3);
        let (mut add_store, g_add) = build(cfg, 9);
        cfg.prior_fusion = PriorFusion::Subtract;
        let (mut sub_store, g_sub) = build(cfg, 9);
        let pp = g_add.prior_projection().unwrap().clone();
        // Perturb beta so the equivalence is not an artifact of beta = 0.
        add_store.get_mut(pp.bn.beta).data_mut().copy_from_slice(&[0.3, -0.2]);
        sub_store.get_mut(pp.bn.beta).data_mut().copy_from_slice(&[0.3, -0.2]);
        // Negating conv weight and beta negates the whole train-mode projection.
        let negate = |st: &mut ParamStore<f32>| {
            for id in [pp.conv.weight, pp.bn.beta] {
                st.get_mut(id).data_mut().iter_mut().for_each(|v| *v = -*v);
            }
        };
        let (e, d, p) = (random([2, 4, 5, 5], 10), random([2, 4, 5, 5], 11), random([2, 3, 5, 5], 12));
        let (sub_out, _) = run(&mut sub_store, &g_sub, &e, &d, &p, Mode::Train);
        negate(&mut add_store);
        let (add_out, _) = run(&mut add_store, &g_add, &e, &d, &p, Mode::Train);
        assert_eq!(sub_out.max_abs_diff(&add_out), 0.0);

        // And the other direction: subtracting a negated projection adds it.
        let (mut add_store2, _) = build(GateConfig::new(4, 4, 3), 9);
        add_store2.get_mut(pp.bn.beta).data_mut().copy_from_slice(&[0.3, -0.2]);
        let (add_plain, _) = run(&mut add_store2, &g_add, &e, &d, &p, Mode::Train);
        negate(&mut sub_store);
        let (sub_neg, _) = run(&mut sub_store, &g_sub, &e, &d, &p, Mode::Train);
        assert_eq!(add_plain.max_abs_diff(&sub_neg), 0.0);
    }

    #[test]
    fn dual_no_prior_ignores_prior() {
        let mut cfg = GateConfig::new(4, 4, 3);
        cfg.variant = GateVariant::DualNoPrior;
        let (mut store, g) = build(cfg, 13);
        let (e, d) = (random([1, 4, 6, 6], 14), random([1, 4, 6, 6], 15));
        let (a, _) = run(&mut store, &g, &e, &d, &random([1, 3, 6, 6], 16), Mode::Eval);
        let (b, _) = run(&mut store, &g, &e, &d, &random([1, 3, 6, 6], 17), Mode::Eval);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn variants_keep_target_channels_and_param_counts() {
        for variant in GateVariant::ALL {
            for target in [AttendTarget::Encoder, AttendTarget::Decoder] {
                let cfg = GateConfig { variant, attend_target: target, ..GateConfig::new(6, 4, 3) };
                let (mut store, g) = build(cfg, 18);
                assert_eq!(store.count_trainable(), cfg.param_count(), "{variant} {target:?}");
                let (e, d, p) = (random([2, 6, 8, 8], 19), random([2, 4, 8, 8], 20), random([2, 3, 8, 8], 21));
                let (att, alpha) = run(&mut store, &g, &e, &d, &p, Mode::Train);
                assert_eq!(att.shape().c, cfg.target_c(), "{variant}");
                assert_eq!((att.shape().h, att.shape().w), (8, 8));
                assert!(alpha.data().iter().all(|&a| (0.0..=1.0).contains(&a)));
                if variant == GateVariant::ChannelOnly {
                    assert_eq!((alpha.shape().h, alpha.shape().w), (1, 1));
                }
            }
        }
    }

    #[test]
    fn unknown_variant_rejected() {
        assert!("triple".parse::<GateVariant>().is_ok());
        let err = "quadruple".parse::<GateVariant>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn spatial_mismatch_names_all_shapes() {
        let (mut store, g) = build(GateConfig::new(4, 4, 3), 22);
        let mut s = Session::new(&mut store, Mode::Eval);
        let e = s.input(Tensor4::zeros([1, 4, 8, 8]));
        let d = s.input(Tensor4::zeros([1, 4, 8, 8]));
        let p = s.input(Tensor4::zeros([1, 3, 4, 4]));
        let msg = g.forward(&mut s, e, d, p).unwrap_err().to_string();
        assert!(msg.contains("1x4x8x8") && msg.contains("1x3x4x4"), "{msg}");
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        for seed in 0..3 {
            for variant in GateVariant::ALL {
                let cfg = GateConfig { variant, ..GateConfig::new(4, 4, 4) };
                let mut store = ParamStore::<f64>::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = Gate::build(&mut ParamBuilder::new(&mut store, &mut rng), cfg).unwrap();
                let inputs = [random::<f64>([1, 4, 8, 8], seed + 1), random([1, 4, 8, 8], seed + 2), random([1, 4, 8, 8], seed + 3)];
                let weights = random::<f64>([1, 4, 8, 8], seed + 4);
                let report = check_session_gradients(
                    &store,
                    &inputs,
                    Mode::Train,
                    |s, v| {
                        let w = s.input(weights.clone());
                        let o = g.forward(s, v[0], v[1], v[2])?;
                        let y = s.tape.mul(o.attended, w)?;
                        Ok(s.tape.sum(y))
                    },
                    &GradCheckConfig { max_elements: Some(80), seed, ..Default::default() },
                );
                assert!(report.passed, "{variant} seed {seed}: {report:?}");
            }
        }
    }
}
