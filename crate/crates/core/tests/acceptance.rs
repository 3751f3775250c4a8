//! Acceptance suite: one pass/fail line per criterion, then a single
//! assertion over all of them. The desk-scale training runs are shared by
//! the criteria that inspect them.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use prior_attunet::blocks::ConvKind;
use prior_attunet::data::{phantom_corpus, split, LabeledSlice, PhantomPreset, Prepared};
use prior_attunet::gate::{AttendTarget, GateVariant, PriorFusion};
use prior_attunet::losses::{dice_class_loss, dsc, lovasz_class_loss, lovasz_per_class, LabelMap, MetricsRecord};
use prior_attunet::net::{Head, ModelConfig, SegModel, Upsample};
use prior_attunet::diffcore::Mode;
use prior_attunet::nn::Session;
use prior_attunet::priornet::{NormNetFusion, PriorSource};
use prior_attunet::runtime::ablation::AblationRow;
use prior_attunet::runtime::heatmap::HEATMAP_FILES;
use prior_attunet::runtime::train::segmentation_checkpoint;
use prior_attunet::runtime::{
    export_heatmaps, pretrain_prior, train_segmentation, AblationAxis, AblationTable, LoadedModel, PriorBundle, PriorReport, RunConfig, TrainedSeg,
};
use prior_attunet::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const DESK_COUNT: usize = 300;
const FREE_COUNT: usize = 200;
const DESK_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Line {
    id: usize,
    pass: bool,
    detail: String,
}

fn line(id: usize, pass: bool, detail: impl Into<String>) -> Line {
    let l = Line { id, pass, detail: detail.into() };
    println!("criterion {:>2}: {} {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
    l
}

fn gradient_suite() -> Line {
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut checks = 0;
    for seed in 0..3 {
        for (name, r) in common::gradient_suite(seed) {
            checks += 1;
            if !r.passed || (r.checked == 0 && r.failure.is_none()) {
                failed.push(format!("seed {seed} {name}"));
            }
        }
    }
    let t = start.elapsed();
    let pass = failed.is_empty() && t < Duration::from_secs(120);
    line(1, pass, format!("gradient suite: {checks} checks, {} failed {failed:?}, {:.1}s", failed.len(), t.as_secs_f64()))
}

/// Exact `1 - |P ∩ G| / |P ∪ G|` with the empty-union case at zero.
fn jaccard_loss(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let union = pred.iter().zip(gt).filter(|(p, g)| **p || **g).count();
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

fn lovasz_oracle() -> Line {
    let start = Instant::now();
    let mut cases = 0usize;
    let mut mismatches = Vec::new();
    for n in 1..=6usize {
        for gmask in 0u32..1 << n {
            let gt: Vec<bool> = (0..n).map(|i| gmask >> i & 1 == 1).collect();
            let labels = LabelMap::new(1, 1, n, gt.iter().map(|&g| g as u8).collect()).unwrap();
            for pmask in 0u32..1 << n {
                let pred: Vec<bool> = (0..n).map(|i| pmask >> i & 1 == 1).collect();
                let want = jaccard_loss(&pred, &gt);
                let errors: Vec<f64> = pred.iter().zip(&gt).map(|(&p, &g)| if p == g { 0.0 } else { 1.0 }).collect();
                let (direct, _) = lovasz_class_loss(&errors, &gt);
                let probs = Tensor4::<f64>::from_fn([1, 2, 1, n], |_, c, _, x| if pred[x] == (c == 1) { 1.0 } else { 0.0 });
                let (per_class, _, _) = lovasz_per_class(&probs, &labels).unwrap().swap_remove(1);
                cases += 1;
                if direct != want || per_class != want {
                    mismatches.push((n, gmask, pmask, direct, per_class, want));
                }
            }
        }
    }
    let t = start.elapsed();
    let pass = mismatches.is_empty() && t < Duration::from_secs(10);
    line(2, pass, format!("lovasz == 1 - IoU on {cases} vertex cases, {} mismatches, {:.2}s {:?}", mismatches.len(), t.as_secs_f64(), mismatches.first()))
}

fn dice_cases() -> Line {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-6;
    let a = LabelMap::new(1, 1, 4, vec![1, 1, 0, 0]).unwrap();
    let b = LabelMap::new(1, 1, 4, vec![0, 1, 1, 0]).unwrap();
    let c = LabelMap::new(1, 1, 4, vec![0, 0, 1, 1]).unwrap();
    let all = LabelMap::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
    let checks = [
        ("dice perfect", dice_class_loss(&[1.0f64, 0.0, 1.0], &[true, false, true], 1.0).0, 0.0),
        ("dice empty prediction eps 1", dice_class_loss(&[0.0f64; 4], &[true; 4], 1.0).0, 0.8),
        ("dice half overlap eps 0", dice_class_loss(&[1.0f64, 0.0], &[true, true], 0.0).0, 1.0 / 3.0),
        ("dsc identical", dsc(&a, &a, 1).unwrap(), 1.0),
        ("dsc disjoint", dsc(&a, &c, 1).unwrap(), 0.0),
        ("dsc half", dsc(&a, &b, 1).unwrap(), 0.5),
        ("dsc absent in both", dsc(&a, &b, 3).unwrap(), 1.0),
        ("mdsc of {1, 0.5}", MetricsRecord::from_per_class(vec![1.0, 0.5]).mdsc, 0.75),
        ("mdsc perfect", prior_attunet::losses::mdsc(&all, &all, 4, true).unwrap().mdsc, 1.0),
    ];
    let bad: Vec<_> = checks.iter().filter(|(_, got, want)| !close(*got, *want)).map(|(n, got, want)| format!("{n}: {got} vs {want}")).collect();
    line(3, bad.is_empty(), format!("{} closed-form dice/dsc cases, failures {bad:?}", checks.len()))
}

fn table_consistency() -> Line {
    let fluid = [0.9607, 0.9729, 0.8927];
    let reported = 0.9563;
    let background = 4.0 * reported - fluid.iter().sum::<f64>();
    let rec = MetricsRecord::from_per_class(vec![background, fluid[0], fluid[1], fluid[2]]);
    let pass = (0.0..=1.0).contains(&background) && (rec.mdsc - reported).abs() <= 5e-4;
    line(4, pass, format!("back-solved background {background:.4}, 4-class mean {:.4} vs {reported}", rec.mdsc))
}

struct SeedRun {
    seed: u64,
    run: RunConfig,
    prior: PriorBundle,
    prior_report: PriorReport,
    baseline: f64,
    full: TrainedSeg,
    no_prior: TrainedSeg,
    wall: Duration,
}

/// Validation MSE of the mean training image, over the same held-out split
/// the pretraining selects on.
fn mean_image_baseline(free: &[LabeledSlice], run: &RunConfig) -> f64 {
    let data = Prepared::new(free, (run.model.input_size[0], run.model.input_size[1])).unwrap();
    let plan = split(data.len(), 1.0 - run.prior.vae_val_ratio, run.train.seed).unwrap();
    let (train, _) = data.gather(&plan.train_ids).unwrap();
    let (val, _) = data.gather(&plan.test_ids).unwrap();
    let per = train.item(0).len();
    let mut mean = vec![0.0f64; per];
    for i in 0..plan.train_ids.len() {
        train.item(i).iter().zip(&mut mean).for_each(|(&v, m)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= plan.train_ids.len() as f64);
    let mut total = 0.0;
    for i in 0..plan.test_ids.len() {
        total += val.item(i).iter().zip(&mean).map(|(&v, m)| (v as f64 - m).powi(2)).sum::<f64>();
    }
    total / (plan.test_ids.len() * per) as f64
}

fn desk_runs(data: &Prepared, free: &[LabeledSlice]) -> Vec<SeedRun> {
    SEEDS
        .iter()
        .map(|&seed| {
            let mut run = RunConfig::desk();
            run.train.seed = seed;
            let plan = split(data.len(), run.train.split_ratio, seed).unwrap();
            let start = Instant::now();
            let (prior, prior_report) = pretrain_prior(free, &run).unwrap();
            let full = train_segmentation(data, &plan, &run, Some(&mut prior.clone())).unwrap();
            let wall = start.elapsed();
            let no_prior_run = AblationAxis::Prior.apply(&run, "off").unwrap();
            let no_prior = train_segmentation(data, &plan, &no_prior_run, None).unwrap();
            println!(
                "desk seed {seed}: full {:.4} (best epoch {}), no-prior {:.4}, vae {:.6} vs baseline {:.6}, {:.0}s",
                full.report.final_test.slice_macro.mdsc,
                full.report.best_epoch,
                no_prior.report.final_test.slice_macro.mdsc,
                prior_report.best_val_mse,
                prior_report.baseline_mse,
                wall.as_secs_f64()
            );
            SeedRun { seed, baseline: mean_image_baseline(free, &run), run, prior, prior_report, full, no_prior, wall }
        })
        .collect()
}

fn desk_training(runs: &[SeedRun]) -> Line {
    let scores: Vec<f64> = runs.iter().map(|r| r.full.report.final_test.slice_macro.mdsc).collect();
    let floor = scores.iter().all(|&s| s >= 0.85);
    let strong = scores.iter().filter(|&&s| s >= 0.90).count();
    let slowest = runs.iter().map(|r| r.wall).max().unwrap();
    let pass = floor && strong >= 2 && slowest <= DESK_BUDGET;
    let scores: Vec<String> = scores.iter().map(|s| format!("{s:.4}")).collect();
    line(5, pass, format!("desk held-out mDSC {scores:?}, {strong}/3 >= 0.90, slowest seed {:.0}s", slowest.as_secs_f64()))
}

fn ablation_direction(runs: &[SeedRun]) -> Line {
    let mut rows = Vec::new();
    let full_params = runs[0].full.model.cfg.param_count();
    let off_params = runs[0].no_prior.model.cfg.param_count();
    for variant in ["on", "off"] {
        let mut sum = vec![0.0; 4];
        for r in runs {
            let t = if variant == "on" { &r.full } else { &r.no_prior };
            let m = t.report.final_test.slice_macro.clone();
            m.per_class_dsc.iter().zip(&mut sum).for_each(|(v, s)| *s += v);
            let rel = t.report.step_seconds / r.full.report.step_seconds;
            rows.push(AblationRow { variant: variant.into(), seed: Some(r.seed), metrics: m, params: t.model.cfg.param_count(), rel_step_time: rel });
        }
        let mean = MetricsRecord::from_per_class(sum.iter().map(|s| s / runs.len() as f64).collect());
        let params = if variant == "on" { full_params } else { off_params };
        rows.push(AblationRow { variant: variant.into(), seed: None, metrics: mean, params, rel_step_time: 1.0 });
    }
    let table = AblationTable { axis: AblationAxis::Prior, num_classes: 4, rows, skipped: Vec::new() };
    print!("{}", table.to_csv());
    let on = table.mean_row("on").unwrap().metrics.mdsc;
    let off = table.mean_row("off").unwrap().metrics.mdsc;
    line(6, on >= off - 0.005, format!("mean mDSC full {on:.4} vs no-prior {off:.4} (floor {:.4})", off - 0.005))
}

fn vae_pretraining(runs: &[SeedRun]) -> Line {
    let mut parts = Vec::new();
    let mut wins = 0;
    for r in runs {
        let ok = r.prior_report.best_val_mse < r.baseline;
        wins += ok as usize;
        parts.push(format!("seed {}: {:.6} vs {:.6}", r.seed, r.prior_report.best_val_mse, r.baseline));
    }
    line(7, wins == runs.len(), format!("vae beats mean-image baseline {wins}/{}: {}", runs.len(), parts.join(", ")))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn cli(args: &[&str]) -> bool {
    let out = Command::new(env!("CARGO_BIN_EXE_prior-attunet")).args(args).env("RUST_LOG", "warn").output().unwrap();
    if !out.status.success() {
        eprintln!("{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.success()
}

fn determinism() -> Line {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("short.toml");
    std::fs::write(&config, "preset = \"desk\"\nepochs = 2\nvae_epochs = 2\n").unwrap();
    let mut ok = cli(&["gen-phantoms", "--out", p(&root.join("labeled")), "--count", "40", "--seed", "3"]);
    ok &= cli(&["gen-phantoms", "--out", p(&root.join("free")), "--count", "12", "--seed", "4", "--fluid-free"]);
    let prior = root.join("prior.ckpt");
    ok &= cli(&["pretrain-prior", "--data", p(&root.join("free")), "--out", p(&prior), "--config", p(&config)]);
    let mut outputs = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let out = root.join(name);
        ok &= cli(&["train", "--data", p(&root.join("labeled")), "--prior", p(&prior), "--out", p(&out), "--config", p(&config)]);
        outputs.push((std::fs::read(&out).unwrap_or_default(), std::fs::read(out.with_extension("csv")).unwrap_or_default()));
    }
    let same_ckpt = ok && !outputs[0].0.is_empty() && outputs[0].0 == outputs[1].0;
    let same_csv = ok && !outputs[0].1.is_empty() && outputs[0].1 == outputs[1].1;
    line(8, same_ckpt && same_csv, format!("two desk-config train runs: checkpoint identical {same_ckpt}, csv identical {same_csv}"))
}

fn heatmaps(runs: &[SeedRun], data: &Prepared) -> Line {
    let r = &runs[0];
    let ckpt = segmentation_checkpoint(&r.run, &r.full, Some(&r.prior)).unwrap();
    let mut loaded = LoadedModel::from_checkpoint(&ckpt).unwrap();
    let plan = split(data.len(), loaded.run.train.split_ratio, r.seed).unwrap();
    let (image, gt) = data.gather(&plan.test_ids[..1]).unwrap();
    let prior_input = loaded.prior_input(&image).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = export_heatmaps(&loaded.model, &mut loaded.store, &image, prior_input.as_ref(), &gt, dir.path()).unwrap();
    let widths: Vec<u32> = HEATMAP_FILES
        .iter()
        .map(|stem| image::open(dir.path().join(format!("{stem}.pgm"))).map(|i| i.width()).unwrap_or(0))
        .collect();
    let desk_ok = written.len() == 6 && widths == [64, 4, 8, 16, 32, 64];

    let cfg = ModelConfig { base_c: 8, midc: 8, input_size: [256, 256], ..ModelConfig::default() };
    let (model, mut store) = SegModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut s = Session::new(&mut store, Mode::Eval).frozen();
    let x = s.input(Tensor4::full([1, 3, 256, 256], 0.5));
    let prior = s.input(Tensor4::full([1, 3, 256, 256], 0.5));
    let out = model.forward(&mut s, x, Some(prior)).unwrap();
    let full: Vec<usize> = out.taps.schedule(&s).iter().map(|(_, (h, _))| *h).collect();
    let full_ok = full == [16, 32, 64, 128, 256];
    line(9, desk_ok && full_ok, format!("desk model wrote {} files with widths {widths:?}; 256-px tap schedule {full:?}", written.len()))
}

fn fuzzed_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let head = if rng.random_bool(0.2) { Head::SigmoidBinary } else { Head::SoftmaxMulticlass };
    ModelConfig {
        base_c: rng.random_range(1..=6),
        ratio: rng.random_range(1..=5),
        conv_kind: if rng.random_bool(0.5) { ConvKind::DepthwiseSeparable } else { ConvKind::Standard },
        aspp_enabled: rng.random_bool(0.7),
        gate_enabled: rng.random_bool(0.8),
        gate_variant: GateVariant::ALL[rng.random_range(0..GateVariant::ALL.len())],
        prior_fusion: if rng.random_bool(0.5) { PriorFusion::Add } else { PriorFusion::Subtract },
        attend_target: if rng.random_bool(0.5) { AttendTarget::Encoder } else { AttendTarget::Decoder },
        midc: rng.random_range(1..=6),
        prior_source: PriorSource::ALL[rng.random_range(0..PriorSource::ALL.len())],
        normnet_fusion: if rng.random_bool(0.5) { NormNetFusion::Conv } else { NormNetFusion::TransposedConv },
        upsample: if rng.random_bool(0.5) { Upsample::Bilinear } else { Upsample::TransposedConv },
        num_classes: if head == Head::SigmoidBinary { 1 } else { rng.random_range(2..=5) },
        head,
        input_size: [32, 32],
        ..ModelConfig::default()
    }
}

fn parameter_accounting() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = Vec::new();
    for _ in 0..10 {
        let cfg = fuzzed_config(&mut rng);
        let (_, store) = SegModel::init(cfg.clone(), &mut rng).unwrap();
        let (built, closed) = (SegModel::count_params(&store), cfg.param_count());
        if built != closed {
            mismatches.push(format!("{cfg:?}: built {built}, closed form {closed}"));
        }
    }
    let reference = ModelConfig::default().param_count();
    line(
        10,
        mismatches.is_empty(),
        format!("10 fuzzed configs, {} mismatches {mismatches:?}; base_c=64 ratio=3 count {:.2}M (reference 47.04M)", mismatches.len(), reference as f64 / 1e6),
    )
}

#[test]
fn acceptance_criteria() {
    let mut lines = vec![gradient_suite(), lovasz_oracle(), dice_cases(), table_consistency()];

    let labeled = phantom_corpus(PhantomPreset::Desk, DESK_COUNT, 0, false).unwrap();
    let free = phantom_corpus(PhantomPreset::Desk, FREE_COUNT, 1, true).unwrap();
    let data = Prepared::new(&labeled, (64, 64)).unwrap();
    let runs = desk_runs(&data, &free);
    lines.push(desk_training(&runs));
    lines.push(ablation_direction(&runs));
    lines.push(vae_pretraining(&runs));
    lines.push(determinism());
    lines.push(heatmaps(&runs, &data));
    lines.push(parameter_accounting());

    println!("\nacceptance summary");
    for l in &lines {
        println!("criterion {:>2}: {}", l.id, if l.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
