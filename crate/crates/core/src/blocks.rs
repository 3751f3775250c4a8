//! Composite feature blocks: the densely connected depthwise-separable block
//! and the atrous spatial pyramid pooling bottleneck.

use serde::{Deserialize, Serialize};

use crate::diffcore::conv::ConvSpec;
use crate::diffcore::pool::PoolKind;
use crate::diffcore::tape::Var;
use crate::error::{Error, Result};
use crate::nn::{bn_param_count, conv_param_count, BatchNorm, Conv, ConvBnRelu, ParamBuilder, Session};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    #[default]
    DepthwiseSeparable,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBlockConfig {
    pub in_c: usize,
    pub out_c: usize,
    /// Number of internal layers.
    pub ratio: usize,
    pub conv_kind: ConvKind,
}

impl DenseBlockConfig {
    pub fn new(in_c: usize, out_c: usize, ratio: usize, conv_kind: ConvKind) -> Self {
        DenseBlockConfig { in_c, out_c, ratio, conv_kind }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 1 {
            return Err(Error::config(format!("dense block ratio must be >= 1, got {}", self.ratio)));
        }
        if self.in_c == 0 || self.out_c == 0 {
            return Err(Error::config("dense block channels must be positive"));
        }
        Ok(())
    }
}

/// `(layer_in_c, layer_out_c)` per layer: layer `l` sees the block input plus
/// every earlier layer's output.
pub fn dense_block_channel_plan(cfg: &DenseBlockConfig) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    Ok((0..cfg.ratio).map(|l| (cfg.in_c + l * cfg.out_c, cfg.out_c)).collect())
}

/// Closed-form trainable parameter count of a dense block.
pub fn dense_block_param_count(cfg: &DenseBlockConfig) -> Result<usize> {
    Ok(dense_block_channel_plan(cfg)?
        .into_iter()
        .map(|(i, o)| match cfg.conv_kind {
            ConvKind::DepthwiseSeparable => conv_param_count(i, i, 3, i, false) + conv_param_count(i, o, 1, 1, false) + bn_param_count(o),
            ConvKind::Standard => conv_param_count(i, o, 3, 1, false) + bn_param_count(o),
        })
        .sum())
}

#[derive(Clone, Debug)]
pub enum DenseLayer {
    Separable { depthwise: Conv, pointwise: Conv, bn: BatchNorm },
    Standard(ConvBnRelu),
}

impl DenseLayer {
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, z: Var) -> Result<Var> {
        match self {
            DenseLayer::Separable { depthwise, pointwise, bn } => {
                let y = depthwise.forward(s, z)?;
                let y = pointwise.forward(s, y)?;
                let y = bn.forward(s, y)?;
                Ok(s.tape.relu(y))
            }
            DenseLayer::Standard(c) => c.forward(s, z),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub cfg: DenseBlockConfig,
    pub layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<T>, cfg: DenseBlockConfig) -> Result<Self> {
        let plan = dense_block_channel_plan(&cfg)?;
        let layers = plan
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| {
                let mut lb = b.scope(&format!("layer{l}"));
                match cfg.conv_kind {
                    ConvKind::DepthwiseSeparable => DenseLayer::Separable {
                        depthwise: lb.scope("dw").conv(i, i, 3, ConvSpec::depthwise3x3(i), false),
                        pointwise: lb.scope("pw").conv(i, o, 1, ConvSpec::default(), false),
                        bn: lb.scope("bn").batch_norm(o),
                    },
                    ConvKind::Standard => DenseLayer::Standard(lb.conv_bn_relu(i, o, 3, ConvSpec::same3x3())),
                }
            })
            .collect();
        Ok(DenseBlock { cfg, layers })
    }

    /// Returns the last layer's output.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let c = s.tape.shape(x).c;
        if c != self.cfg.in_c {
            return Err(Error::shape("dense_block", format!("input has {c} channels, block expects {}", self.cfg.in_c)));
        }
        let mut feats = vec![x];
        let mut last = x;
        for layer in &self.layers {
            let z = if feats.len() == 1 { feats[0] } else { s.tape.concat(&feats)? };
            last = layer.forward(s, z)?;
            feats.push(last);
        }
        Ok(last)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsppConfig {
    pub in_c: usize,
    pub out_c: usize,
    pub rates: Vec<usize>,
    pub dropout_rate: f64,
}

impl AsppConfig {
    pub const DEFAULT_RATES: [usize; 4] = [1, 6, 12, 18];

    pub fn new(in_c: usize, out_c: usize) -> Self {
        AsppConfig { in_c, out_c, rates: Self::DEFAULT_RATES.to_vec(), dropout_rate: 0.5 }
    }

    /// Width of each branch. The pooled branch carries the input channels
    /// through unchanged, so every branch matches it.
    pub fn branch_c(&self) -> usize {
        self.in_c
    }

    /// Channels entering the fusion convolution.
    pub fn concat_c(&self) -> usize {
        (self.rates.len() + 1) * self.branch_c()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_c == 0 || self.out_c == 0 {
            return Err(Error::config("aspp channels must be positive"));
        }
        if self.rates.is_empty() || self.rates.contains(&0) {
            return Err(Error::config(format!("aspp rates must be positive, got {:?}", self.rates)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("aspp dropout must be in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let bc = self.branch_c();
        let branches = self.rates.len() * (conv_param_count(self.in_c, bc, 3, 1, false) + bn_param_count(bc));
        let pooled = bn_param_count(self.in_c);
        let fusion = conv_param_count(self.concat_c(), self.out_c, 1, 1, false) + bn_param_count(self.out_c);
        branches + pooled + fusion
    }
}

#[derive(Clone, Debug)]
pub struct Aspp {
    pub cfg: AsppConfig,
    pub branches: Vec<ConvBnRelu>,
    pub pooled_bn: BatchNorm,
    pub fusion: ConvBnRelu,
}

/// Intermediate values of one ASPP pass.
#[derive(Clone, Copy, Debug)]
pub struct AsppTrace {
    pub concat: Var,
    pub pooled: Var,
    pub output: Var,
}

impl Aspp {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<T>, cfg: AsppConfig) -> Result<Self> {
        cfg.validate()?;
        let bc = cfg.branch_c();
        let branches = cfg
            .rates
            .iter()
            .enumerate()
            .map(|(i, &r)| b.scope(&format!("branch{i}")).conv_bn_relu(cfg.in_c, bc, 3, ConvSpec::dilated3x3(r)))
            .collect();
        let pooled_bn = b.scope("pool_bn").batch_norm(cfg.in_c);
        let fusion = b.scope("fusion").conv_bn_relu(cfg.concat_c(), cfg.out_c, 1, ConvSpec::default());
        Ok(Aspp { cfg, branches, pooled_bn, fusion })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        self.forward_traced(s, x).map(|t| t.output)
    }

    pub fn forward_traced<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<AsppTrace> {
        let sh = s.tape.shape(x);
        if sh.c != self.cfg.in_c {
            return Err(Error::shape("aspp", format!("input {sh} vs {} channels", self.cfg.in_c)));
        }
        if sh.h < 1 || sh.w < 1 {
            return Err(Error::shape("aspp", format!("empty spatial dims {sh}")));
        }
        let mut parts = Vec::with_capacity(self.branches.len() + 1);
        for br in &self.branches {
            parts.push(br.forward(s, x)?);
        }
        let g = s.tape.pool(x, PoolKind::GlobalMax)?;
        let g = self.pooled_bn.forward(s, g)?;
        let g = s.tape.relu(g);
        let pooled = s.tape.resize_bilinear(g, (sh.h, sh.w))?;
        parts.push(pooled);
        let concat = s.tape.concat(&parts)?;
        let y = self.fusion.forward(s, concat)?;
        let output = s.dropout(y, self.cfg.dropout_rate)?;
        Ok(AsppTrace { concat, pooled, output })
    }
}
