//! Prior pretraining, segmentation training and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::{split, substream, LabeledSlice, Prepared, SplitPlan, Stream};
use crate::diffcore::Mode;
use crate::error::{Error, Result};
use crate::losses::{combined_loss_on_tape, dsc, LabelMap, MetricsRecord};
use crate::net::{Head, SegModel};
use crate::nn::{ParamStore, Session};
use crate::priornet::{vae_loss, Noise, PriorModel};
use crate::runtime::checkpoint::Checkpoint;
use crate::runtime::config::{EvalSplit, RunConfig};
use crate::runtime::optim::{AdamW, AdamWParams};
use crate::tensor::Tensor4;

/// Items per forward pass during evaluation and reconstruction caching.
pub const EVAL_BATCH: usize = 16;

/// Trained VAE plus its parameters.
#[derive(Clone, Debug)]
pub struct PriorBundle {
    pub model: PriorModel,
    pub store: ParamStore<f32>,
}

impl PriorBundle {
    /// Deterministic reconstructions of every item, computed in fixed chunks.
    pub fn reconstruct_all(&mut self, images: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        map_chunks(images, |chunk| self.model.reconstruct(&mut self.store, chunk))
    }
}

fn map_chunks(images: &Tensor4<f32>, mut f: impl FnMut(&Tensor4<f32>) -> Result<Tensor4<f32>>) -> Result<Tensor4<f32>> {
    let s = images.shape();
    let mut out = Vec::with_capacity(images.len());
    let mut start = 0;
    while start < s.n {
        let n = EVAL_BATCH.min(s.n - start);
        let chunk = Tensor4::from_vec([n, s.c, s.h, s.w], images.data()[start * images.item(0).len()..(start + n) * images.item(0).len()].to_vec())?;
        let r = f(&chunk)?;
        out.extend_from_slice(r.data());
        start += n;
    }
    Tensor4::from_vec(s, out)
}

fn adam_params(lr: f64, run: &RunConfig) -> AdamWParams {
    let t = &run.train;
    AdamWParams { lr, beta1: t.beta1, beta2: t.beta2, eps: t.eps_opt, weight_decay: t.weight_decay }
}

/// Consecutive batches of `ids`; a trailing batch of one item is merged into
/// its predecessor because batch normalization needs two samples.
fn batches(ids: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = ids.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let k = out.len() - 1;
        let start = k * size;
        out[k] = &ids[start..];
    }
    out
}

fn check_finite(v: f64, what: &str, epoch: usize, batch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {v} at epoch {epoch}, batch {batch}")))
    }
}

/// MSE of predicting every validation image with the mean training image.
pub fn mean_image_mse(train: &Tensor4<f32>, val: &Tensor4<f32>) -> f64 {
    let per = train.item(0).len();
    let mut mean = vec![0.0f64; per];
    let n = train.shape().n;
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(train.item(i)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let vn = val.shape().n;
    let mut sq = 0.0;
    for i in 0..vn {
        for (m, &v) in mean.iter().zip(val.item(i)) {
            sq += (v as f64 - m).powi(2);
        }
    }
    sq / (vn * per) as f64
}

fn mse(a: &Tensor4<f32>, b: &Tensor4<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorReport {
    /// Mean training loss per epoch; entry 0 is the untrained model.
    pub train_loss: Vec<f64>,
    /// Validation reconstruction MSE per epoch; entry 0 is the untrained model.
    pub val_mse: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Validation MSE of the mean training image.
    pub baseline_mse: f64,
}

/// Trains the VAE on fluid-free slices and keeps the weights with the lowest
/// validation reconstruction MSE.
pub fn pretrain_prior(ds: &[LabeledSlice], run: &RunConfig) -> Result<(PriorBundle, PriorReport)> {
    if ds.is_empty() {
        return Err(Error::Data("prior pretraining needs at least one slice".into()));
    }
    if let Some(s) = ds.iter().find(|s| s.has_foreground()) {
        return Err(Error::Data(format!("prior pretraining slice {} contains fluid pixels", s.name)));
    }
    if ds.len() < 3 {
        return Err(Error::Data(format!("prior pretraining needs at least 3 slices, got {}", ds.len())));
    }
    let seed = run.train.seed;
    let pc = &run.prior;
    let data = Prepared::new(ds, (run.model.input_size[0], run.model.input_size[1]))?;
    let plan = split(data.len(), 1.0 - pc.vae_val_ratio, seed)?;
    let (val_images, _) = data.gather(&plan.test_ids)?;
    let (train_images, _) = data.gather(&plan.train_ids)?;
    let baseline_mse = mean_image_mse(&train_images, &val_images);

    let (model, mut store) = PriorModel::init(run.vae(), &mut substream(seed, Stream::PriorInit))?;
    let mut opt = AdamW::new(adam_params(pc.vae_lr, run), &store);
    let mut noise = substream(seed, Stream::PriorNoise);
    let mut order_rng = substream(seed, Stream::Batches);
    let mut train_ids = plan.train_ids.clone();

    let step_loss = |store: &mut ParamStore<f32>, x: Tensor4<f32>, noise: &mut ChaCha8Rng, update: Option<&mut AdamW>| -> Result<f64> {
        let mut s = Session::new(store, Mode::Train);
        let xv = s.input(x);
        let pass = model.forward(&mut s, xv, Noise::Sample(noise))?;
        let l = vae_loss(&mut s.tape, xv, pass.recon, pass.mu, pass.logvar, pc.vae_beta)?;
        let v = s.value(l.total).data()[0] as f64;
        if let Some(opt) = update.filter(|_| v.is_finite()) {
            s.backward(l.total);
            drop(s);
            opt.step(store)?;
        }
        Ok(v)
    };
    let val_mse = |store: &mut ParamStore<f32>| -> Result<f64> {
        let r = map_chunks(&val_images, |c| model.reconstruct(store, c))?;
        Ok(mse(&r, &val_images))
    };

    // Untrained reference point, measured on a scratch copy so running
    // statistics and streams of the real run are untouched.
    let mut train_loss = {
        let mut scratch = store.clone();
        let mut scratch_noise = noise.clone();
        let mut sum = 0.0;
        let bs = batches(&train_ids, pc.vae_batch_size);
        for b in &bs {
            sum += step_loss(&mut scratch, data.gather(b)?.0, &mut scratch_noise, None)?;
        }
        vec![sum / bs.len() as f64]
    };
    let mut val = vec![val_mse(&mut store)?];
    let mut best = (0usize, val[0], store.clone());

    for epoch in 1..=pc.vae_epochs {
        train_ids.shuffle(&mut order_rng);
        let bs = batches(&train_ids, pc.vae_batch_size);
        let mut sum = 0.0;
        for (bi, b) in bs.iter().enumerate() {
            let l = step_loss(&mut store, data.gather(b)?.0, &mut noise, Some(&mut opt))?;
            check_finite(l, "prior loss", epoch, bi)?;
            sum += l;
        }
        train_loss.push(sum / bs.len() as f64);
        let v = val_mse(&mut store)?;
        val.push(v);
        log::info!("prior epoch {epoch}: train loss {:.6}, val mse {v:.6}, baseline {baseline_mse:.6}", train_loss[epoch]);
        if v < best.1 {
            best = (epoch, v, store.clone());
        }
    }
    let report = PriorReport { train_loss, val_mse: val, best_epoch: best.0, best_val_mse: best.1, baseline_mse };
    Ok((PriorBundle { model, store: best.2 }, report))
}

pub fn prior_checkpoint(run: &RunConfig, bundle: &PriorBundle, report: &PriorReport) -> Result<Checkpoint> {
    Ok(Checkpoint::from_stores(run.to_toml_string()?, report.best_val_mse, report.best_epoch as u64, &[&bundle.store]))
}

pub fn load_prior(ckpt: &Checkpoint) -> Result<(RunConfig, PriorBundle)> {
    let run = RunConfig::from_toml_str(&ckpt.config)?;
    let (model, mut store) = PriorModel::init(run.vae(), &mut substream(0, Stream::PriorInit))?;
    store.load_named(&ckpt.tensor_map())?;
    Ok((run, PriorBundle { model, store }))
}

/// Labels in the head's class space: unchanged for softmax, fluid-vs-background for sigmoid.
pub fn target_labels(head: Head, gt: &LabelMap) -> Result<LabelMap> {
    match head {
        Head::SoftmaxMulticlass => Ok(gt.clone()),
        Head::SigmoidBinary => LabelMap::new(gt.n, gt.h, gt.w, gt.data().iter().map(|&v| (v != 0) as u8).collect()),
    }
}

/// Number of classes the metrics are computed over.
pub fn metric_classes(run: &RunConfig) -> usize {
    match run.model.head {
        Head::SoftmaxMulticlass => run.model.num_classes,
        Head::SigmoidBinary => 2,
    }
}

/// Side-by-side DSC aggregations.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Per-slice per-class DSC averaged over slices, then over classes.
    pub slice_macro: MetricsRecord,
    /// Per-class DSC over all pixels of the split, then averaged over classes.
    pub pixel_pooled: MetricsRecord,
}

pub fn evaluate_masks(pred: &LabelMap, gt: &LabelMap, num_classes: usize, include_background: bool) -> Result<EvalReport> {
    if gt.n == 0 {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let start = if include_background { 0 } else { 1 };
    let classes: Vec<u8> = (start..num_classes as u8).collect();
    let mut macro_sum = vec![0.0; classes.len()];
    for i in 0..gt.n {
        let (p, g) = (pred.item_map(i), gt.item_map(i));
        for (k, &c) in classes.iter().enumerate() {
            macro_sum[k] += dsc(&p, &g, c)?;
        }
    }
    let slice_macro = MetricsRecord::from_per_class(macro_sum.iter().map(|s| s / gt.n as f64).collect());
    let pooled = classes.iter().map(|&c| dsc(pred, gt, c)).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { slice_macro, pixel_pooled: MetricsRecord::from_per_class(pooled) })
}

/// Eval-mode masks for the listed items, predicted in fixed-size chunks.
pub fn predict_items(model: &SegModel, store: &mut ParamStore<f32>, data: &Prepared, recon: Option<&Tensor4<f32>>, ids: &[usize]) -> Result<LabelMap> {
    let mut out = Vec::new();
    for chunk in ids.chunks(EVAL_BATCH) {
        let (x, _) = data.gather(chunk)?;
        let p = match recon {
            Some(r) => Some(gather_tensor(r, chunk)?),
            None => None,
        };
        out.push(model.predict_mask(store, &x, p.as_ref())?);
    }
    LabelMap::stack(&out.iter().collect::<Vec<_>>())
}

fn gather_tensor(t: &Tensor4<f32>, ids: &[usize]) -> Result<Tensor4<f32>> {
    let s = t.shape();
    let mut v = Vec::with_capacity(ids.len() * t.item(0).len());
    for &i in ids {
        v.extend_from_slice(t.item(i));
    }
    Tensor4::from_vec([ids.len(), s.c, s.h, s.w], v)
}

pub fn evaluate(model: &SegModel, store: &mut ParamStore<f32>, data: &Prepared, recon: Option<&Tensor4<f32>>, ids: &[usize], run: &RunConfig, include_background: bool) -> Result<EvalReport> {
    if ids.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let pred = predict_items(model, store, data, recon, ids)?;
    let (_, gt) = data.gather(ids)?;
    evaluate_masks(&pred, &target_labels(run.model.head, &gt)?, metric_classes(run), include_background)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegReport {
    /// `split,epoch,dsc_*,mdsc` rows, header first.
    pub csv: String,
    /// Mean combined loss of the untrained model over the training split.
    pub initial_loss: f64,
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Selection-split evaluation after each epoch.
    pub selection: Vec<EvalReport>,
    /// Test-split evaluation of the best weights.
    pub final_test: EvalReport,
    pub best_epoch: usize,
    pub best_mdsc: f64,
    /// Mean wall-clock seconds per optimizer step.
    pub step_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedSeg {
    pub model: SegModel,
    /// Weights of the best epoch.
    pub store: ParamStore<f32>,
    pub report: SegReport,
}

/// VAE reconstructions of every item when the configured prior needs them.
pub fn prior_inputs(run: &RunConfig, data: &Prepared, prior: Option<&mut PriorBundle>) -> Result<Option<Tensor4<f32>>> {
    if !run.model.needs_vae() {
        return Ok(None);
    }
    let p = prior.ok_or_else(|| Error::config("this configuration feeds VAE reconstructions to the prior; supply a pretrained prior"))?;
    if p.model.cfg.input_size != (run.model.input_size[0], run.model.input_size[1]) {
        return Err(Error::config(format!("prior input size {:?} differs from model input size {:?}", p.model.cfg.input_size, run.model.input_size)));
    }
    Ok(Some(p.reconstruct_all(&data.images)?))
}

/// Trains the segmentation network with per-epoch selection on the
/// configured split and returns the best weights.
pub fn train_segmentation(data: &Prepared, plan: &SplitPlan, run: &RunConfig, prior: Option<&mut PriorBundle>) -> Result<TrainedSeg> {
    run.validate()?;
    let tc = &run.train;
    let seed = tc.seed;
    if plan.train_ids.len() < 2 {
        return Err(Error::Data("training split needs at least two slices".into()));
    }
    let (mut train_ids, select_ids, split_name) = match tc.eval_split {
        EvalSplit::Test => (plan.train_ids.clone(), plan.test_ids.clone(), "test"),
        EvalSplit::Val => {
            let inner = split(plan.train_ids.len(), 1.0 - tc.val_ratio, seed ^ 0x5eed)?;
            (inner.train_ids.iter().map(|&i| plan.train_ids[i]).collect(), inner.test_ids.iter().map(|&i| plan.train_ids[i]).collect(), "val")
        }
    };
    if select_ids.is_empty() {
        return Err(Error::Data(format!("{split_name} split is empty")));
    }
    let recon = prior_inputs(run, data, prior)?;
    let weights = tc.loss_weights();
    let (model, mut store) = SegModel::init(run.model.clone(), &mut substream(seed, Stream::Init))?;
    let mut opt = AdamW::new(adam_params(tc.lr, run), &store);
    let mut dropout = substream(seed, Stream::Dropout);
    let mut order_rng = substream(seed, Stream::Batches);
    let classes = metric_classes(run);

    let batch_loss = |store: &mut ParamStore<f32>, ids: &[usize], rng: &mut ChaCha8Rng, update: Option<&mut AdamW>| -> Result<f64> {
        let (x, gt) = data.gather(ids)?;
        let gt = target_labels(run.model.head, &gt)?;
        let p = match &recon {
            Some(r) => Some(gather_tensor(r, ids)?),
            None => None,
        };
        let mut s = Session::new(store, Mode::Train).with_rng(rng);
        let xv = s.input(x);
        let pv = p.map(|t| s.input(t));
        let out = model.forward(&mut s, xv, pv)?;
        let probs = model.class_probs(&mut s, out.probs)?;
        let loss = combined_loss_on_tape(&mut s.tape, probs, &gt, &weights)?;
        let v = s.value(loss).data()[0] as f64;
        if let Some(opt) = update.filter(|_| v.is_finite()) {
            s.backward(loss);
            drop(s);
            opt.step(store)?;
        }
        Ok(v)
    };

    let initial_loss = {
        let mut scratch = store.clone();
        let mut scratch_rng = dropout.clone();
        let bs = batches(&train_ids, tc.batch_size);
        let mut sum = 0.0;
        for b in &bs {
            sum += batch_loss(&mut scratch, b, &mut scratch_rng, None)?;
        }
        sum / bs.len() as f64
    };

    let header = crate::losses::MetricsRecord::csv_header(classes);
    let mut csv = format!("{header}\n");
    let mut epoch_loss = Vec::with_capacity(tc.epochs);
    let mut selection = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut step_time = 0.0;
    let mut steps = 0usize;
    for epoch in 1..=tc.epochs {
        train_ids.shuffle(&mut order_rng);
        let bs = batches(&train_ids, tc.batch_size);
        let mut sum = 0.0;
        for (bi, b) in bs.iter().enumerate() {
            let t0 = Instant::now();
            let l = batch_loss(&mut store, b, &mut dropout, Some(&mut opt))?;
            step_time += t0.elapsed().as_secs_f64();
            steps += 1;
            check_finite(l, "segmentation loss", epoch, bi)?;
            sum += l;
        }
        let mean = sum / bs.len() as f64;
        epoch_loss.push(mean);
        let ev = evaluate(&model, &mut store, data, recon.as_ref(), &select_ids, run, true)?;
        let m = ev.slice_macro.mdsc;
        csv.push_str(&ev.slice_macro.csv_row(split_name, epoch));
        csv.push('\n');
        log::info!("epoch {epoch}: loss {mean:.4}, {split_name} mdsc {m:.4} (pixel-pooled {:.4})", ev.pixel_pooled.mdsc);
        selection.push(ev);
        if best.as_ref().is_none_or(|b| m > b.1) {
            best = Some((epoch, m, store.clone()));
        }
    }
    let (best_epoch, best_mdsc, mut best_store) = match best {
        Some(b) => b,
        None => (0, f64::NAN, store),
    };
    let final_test = if plan.test_ids.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    } else {
        evaluate(&model, &mut best_store, data, recon.as_ref(), &plan.test_ids, run, true)?
    };
    let report = SegReport {
        csv,
        initial_loss,
        epoch_loss,
        selection,
        final_test,
        best_epoch,
        best_mdsc,
        step_seconds: if steps > 0 { step_time / steps as f64 } else { 0.0 },
    };
    Ok(TrainedSeg { model, store: best_store, report })
}

/// Segmentation checkpoint: network weights plus, when the prior consumes
/// reconstructions, the VAE weights under their `vae.` names.
pub fn segmentation_checkpoint(run: &RunConfig, trained: &TrainedSeg, prior: Option<&PriorBundle>) -> Result<Checkpoint> {
    let mut stores = vec![&trained.store];
    if run.model.needs_vae() {
        stores.push(&prior.ok_or_else(|| Error::config("checkpoint of a reconstruction-fed model needs the prior"))?.store);
    }
    Ok(Checkpoint::from_stores(run.to_toml_string()?, trained.report.best_mdsc, trained.report.best_epoch as u64, &stores))
}

/// A segmentation network restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub run: RunConfig,
    pub model: SegModel,
    pub store: ParamStore<f32>,
    pub prior: Option<PriorBundle>,
}

impl LoadedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let run = RunConfig::from_toml_str(&ckpt.config)?;
        let map = ckpt.tensor_map();
        let (model, mut store) = SegModel::init(run.model.clone(), &mut substream(0, Stream::Init))?;
        store.load_named(&map)?;
        let prior = if run.model.needs_vae() {
            let (pm, mut ps) = PriorModel::init(run.vae(), &mut substream(0, Stream::PriorInit))?;
            ps.load_named(&map)?;
            Some(PriorBundle { model: pm, store: ps })
        } else {
            None
        };
        Ok(LoadedModel { run, model, store, prior })
    }

    /// Prior inputs for `images`, or `None` when the model takes none.
    pub fn prior_input(&mut self, images: &Tensor4<f32>) -> Result<Option<Tensor4<f32>>> {
        match self.prior.as_mut() {
            Some(p) => Ok(Some(p.reconstruct_all(images)?)),
            None => Ok(None),
        }
    }

    pub fn predict(&mut self, images: &Tensor4<f32>) -> Result<LabelMap> {
        let p = self.prior_input(images)?;
        let mut out = Vec::new();
        let n = images.shape().n;
        let ids: Vec<usize> = (0..n).collect();
        for chunk in ids.chunks(EVAL_BATCH) {
            let x = gather_tensor(images, chunk)?;
            let pc = match &p {
                Some(t) => Some(gather_tensor(t, chunk)?),
                None => None,
            };
            out.push(self.model.predict_mask(&mut self.store, &x, pc.as_ref())?);
        }
        LabelMap::stack(&out.iter().collect::<Vec<_>>())
    }

    pub fn evaluate(&mut self, data: &Prepared, ids: &[usize]) -> Result<EvalReport> {
        let recon = match self.prior.as_mut() {
            Some(p) => Some(p.reconstruct_all(&data.images)?),
            None => None,
        };
        evaluate(&self.model, &mut self.store, data, recon.as_ref(), ids, &self.run, true)
    }
}
