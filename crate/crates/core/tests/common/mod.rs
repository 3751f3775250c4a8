//! Finite-difference gradient suite shared by the gradient and acceptance
//! test targets.
#![allow(dead_code)]

use prior_attunet::blocks::{Aspp, AsppConfig, ConvKind, DenseBlock, DenseBlockConfig};
use prior_attunet::diffcore::{check_gradients, Activation, ConvSpec, GradCheckConfig, GradCheckReport, Mode, PoolKind, Tape, Var};
use prior_attunet::gate::{Gate, GateConfig, GateVariant};
use prior_attunet::losses::{combined_loss_on_tape, LabelMap, LossWeights};
use prior_attunet::net::{ModelConfig, SegModel};
use prior_attunet::nn::{check_session_gradients, ParamBuilder, ParamStore, Session};
use prior_attunet::{Result, Shape, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tolerance for single operators and composite blocks.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the whole network.
pub const NET_TOL: f64 = 1e-3;

pub fn random(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn random_labels(n: usize, h: usize, w: usize, classes: u8, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabelMap::new(n, h, w, (0..n * h * w).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

/// `sum(y * w)` for a fixed random `w`, so every output element carries a
/// distinct upstream gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let s = tape.shape(y);
    let w = tape.constant(random([s.n, s.c, s.h, s.w], seed ^ 0x5eed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn op_cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig { tol: OP_TOL, seed, ..Default::default() }
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn op(name: &str, shapes: &[[usize; 4]], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> (String, Vec<[usize; 4]>, OpFn) {
    (name.to_string(), shapes.to_vec(), Box::new(f))
}

/// One report per differentiable tape operator.
pub fn operator_reports(seed: u64) -> Vec<(String, GradCheckReport)> {
    let cases = vec![
        op("conv2d", &[[2, 3, 6, 5], [4, 3, 3, 3], [1, 4, 1, 1]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::same3x3())),
        op("conv2d_strided_dilated", &[[1, 2, 9, 9], [3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], None, ConvSpec { stride: 2, padding: 2, dilation: 2, groups: 1 })),
        op("conv2d_grouped", &[[1, 4, 5, 5], [4, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], None, ConvSpec { padding: 1, groups: 2, ..Default::default() })),
        op("conv2d_depthwise", &[[2, 3, 6, 6], [3, 1, 3, 3]], |t, v| t.conv2d(v[0], v[1], None, ConvSpec::depthwise3x3(3))),
        op("conv_transpose2d", &[[1, 3, 4, 4], [3, 2, 2, 2], [1, 2, 1, 1]], |t, v| {
            t.conv_transpose2d(v[0], v[1], Some(v[2]), ConvSpec { stride: 2, ..Default::default() })
        }),
        op("batch_norm_train", &[[3, 2, 4, 4], [1, 2, 1, 1], [1, 2, 1, 1]], |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
        op("batch_norm_eval", &[[2, 2, 3, 3], [1, 2, 1, 1], [1, 2, 1, 1]], |t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)),
        op("relu", &[[2, 3, 4, 4]], |t, v| Ok(t.activate(v[0], Activation::Relu))),
        op("sigmoid", &[[2, 3, 4, 4]], |t, v| Ok(t.activate(v[0], Activation::Sigmoid))),
        op("scale", &[[1, 2, 3, 3]], |t, v| Ok(t.scale(v[0], -1.7))),
        op("add", &[[1, 2, 3, 3], [1, 2, 3, 3]], |t, v| t.add(v[0], v[1])),
        op("sub", &[[1, 2, 3, 3], [1, 2, 3, 3]], |t, v| t.sub(v[0], v[1])),
        op("add_n", &[[1, 2, 3, 3], [1, 2, 3, 3], [1, 2, 3, 3]], |t, v| t.add_n(v)),
        op("mul", &[[2, 2, 3, 3], [2, 2, 3, 3]], |t, v| t.mul(v[0], v[1])),
        op("mul_broadcast_channels", &[[2, 3, 3, 3], [2, 1, 3, 3]], |t, v| t.mul(v[0], v[1])),
        op("mul_broadcast_spatial", &[[2, 3, 3, 3], [2, 3, 1, 1]], |t, v| t.mul(v[0], v[1])),
        op("softmax_channels", &[[2, 4, 3, 3]], |t, v| Ok(t.softmax_channels(v[0]))),
        op("mask", &[[1, 2, 3, 3]], |t, v| Ok(t.mask(v[0], (0..18).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect()))),
        op("max_pool_2x2", &[[2, 2, 6, 4]], |t, v| t.pool(v[0], PoolKind::MaxPool2x2)),
        op("global_max_pool", &[[2, 3, 4, 4]], |t, v| t.pool(v[0], PoolKind::GlobalMax)),
        op("global_avg_pool", &[[2, 3, 4, 4]], |t, v| Ok(t.global_avg_pool(v[0]))),
        op("resize_bilinear_up", &[[1, 2, 4, 3]], |t, v| t.resize_bilinear(v[0], (8, 7))),
        op("resize_bilinear_down", &[[1, 2, 8, 8]], |t, v| t.resize_bilinear(v[0], (3, 5))),
        op("concat", &[[2, 1, 3, 3], [2, 3, 3, 3]], |t, v| t.concat(v)),
        op("slice_channels", &[[1, 5, 3, 3]], |t, v| t.slice_channels(v[0], 1, 3)),
        op("channel_mean_max", &[[2, 4, 3, 3]], |t, v| Ok(t.channel_mean_max(v[0]))),
        op("reshape", &[[2, 3, 2, 2]], |t, v| t.reshape(v[0], Shape::new(2, 12, 1, 1))),
        op("sum", &[[2, 2, 3, 3]], |t, v| Ok(t.sum(v[0]))),
        op("mean", &[[2, 2, 3, 3]], |t, v| Ok(t.mean(v[0]))),
        op("mse", &[[2, 2, 3, 3], [2, 2, 3, 3]], |t, v| t.mse(v[0], v[1])),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, shapes, f))| {
            let params: Vec<Tensor4<f64>> = shapes.iter().enumerate().map(|(j, s)| random(*s, seed * 1000 + i as u64 * 10 + j as u64)).collect();
            let proj_seed = seed * 1000 + i as u64;
            let report = check_gradients(
                |t, v| {
                    let y = f(t, v)?;
                    project(t, y, proj_seed)
                },
                &params,
                &op_cfg(seed),
            );
            (name, report)
        })
        .collect()
}

fn session_report<F>(store: &ParamStore<f64>, inputs: &[Tensor4<f64>], f: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: FnMut(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    check_session_gradients(store, inputs, Mode::Train, f, cfg)
}

/// Dense blocks of both convolution kinds and the ASPP bottleneck.
pub fn block_reports(seed: u64) -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    for kind in [ConvKind::DepthwiseSeparable, ConvKind::Standard] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blk = DenseBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), DenseBlockConfig::new(3, 4, 3, kind)).unwrap();
        let r = session_report(
            &store,
            &[random([2, 3, 6, 6], seed + 100)],
            |s, v| {
                let y = blk.forward(s, v[0])?;
                project(&mut s.tape, y, seed + 101)
            },
            &GradCheckConfig { max_elements: Some(150), ..op_cfg(seed) },
        );
        out.push((format!("dense_block_{kind:?}").to_lowercase(), r));
    }
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aspp = Aspp::build(&mut ParamBuilder::new(&mut store, &mut rng), AsppConfig { dropout_rate: 0.0, ..AsppConfig::new(3, 4) }).unwrap();
    let r = session_report(
        &store,
        &[random([2, 3, 8, 8], seed + 200)],
        |s, v| {
            let y = aspp.forward(s, v[0])?;
            project(&mut s.tape, y, seed + 201)
        },
        &GradCheckConfig { max_elements: Some(150), ..op_cfg(seed) },
    );
    out.push(("aspp".to_string(), r));
    out
}

/// Every gate variant, the triple gate first.
pub fn gate_reports(seed: u64) -> Vec<(String, GradCheckReport)> {
    GateVariant::ALL
        .into_iter()
        .map(|variant| {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Gate::build(&mut ParamBuilder::new(&mut store, &mut rng), GateConfig { variant, ..GateConfig::new(4, 4, 3) }).unwrap();
            let inputs = [random([1, 4, 8, 8], seed + 300), random([1, 4, 8, 8], seed + 301), random([1, 3, 8, 8], seed + 302)];
            let r = session_report(
                &store,
                &inputs,
                |s, v| {
                    let o = g.forward(s, v[0], v[1], v[2])?;
                    project(&mut s.tape, o.attended, seed + 303)
                },
                &GradCheckConfig { max_elements: Some(100), ..op_cfg(seed) },
            );
            (format!("gate_{}", variant.name()), r)
        })
        .collect()
}

/// Softmax head into the combined Dice plus Lovász loss on a random
/// `1x4x8x8` prediction.
pub fn loss_report(seed: u64) -> GradCheckReport {
    let gt = random_labels(1, 8, 8, 4, seed + 400);
    let logits = random([1, 4, 8, 8], seed + 401).map(|v| 3.0 * v);
    check_gradients(
        |t, v| {
            let p = t.softmax_channels(v[0]);
            combined_loss_on_tape(t, p, &gt, &LossWeights::default())
        },
        &[logits],
        &op_cfg(seed),
    )
}

/// Full network at `base_c = 4` on a `32x32` input, image plus weights.
pub fn network_report(seed: u64) -> GradCheckReport {
    let cfg = ModelConfig { base_c: 4, midc: 2, aspp_dropout: 0.0, input_size: [32, 32], ..ModelConfig::default() };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = SegModel::build(&mut ParamBuilder::new(&mut store, &mut rng), cfg).unwrap();
    let gt = random_labels(1, 32, 32, 4, seed + 500);
    let prior = random([1, 3, 32, 32], seed + 501).map(|v| 0.5 + 0.5 * v);
    let image = random([1, 3, 32, 32], seed + 502).map(|v| 0.5 + 0.5 * v);
    check_session_gradients(
        &store,
        &[image],
        Mode::Train,
        |s, v| {
            let p = s.input(prior.clone());
            let out = model.forward(s, v[0], Some(p))?;
            combined_loss_on_tape(&mut s.tape, out.probs, &gt, &LossWeights::default())
        },
        &GradCheckConfig { step: 1e-5, max_elements: Some(100), tol: NET_TOL, seed, ..Default::default() },
    )
}

/// The whole suite for one seed.
pub fn gradient_suite(seed: u64) -> Vec<(String, GradCheckReport)> {
    let mut all = operator_reports(seed);
    all.extend(block_reports(seed));
    all.extend(gate_reports(seed));
    all.push(("combined_loss".to_string(), loss_report(seed)));
    all.push(("network".to_string(), network_report(seed)));
    all
}
