//! Training losses (Dice, Lovász-Jaccard, and their weighted sum) and the
//! overlap metrics used for evaluation.

use std::cmp::Ordering;

use crate::diffcore::tape::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor4};

pub const CLASS_NAMES: [&str; 4] = ["bg", "irf", "srf", "ped"];

/// Integer class map of shape `(n, h, w)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

/// Ground-truth labels: a [`LabelMap`] whose values are checked against the
/// class count when used.
pub type GroundTruth = LabelMap;

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape("label_map", format!("{} labels for {n}x{h}x{w}", data.len())));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Labels of batch item `i`.
    pub fn item(&self, i: usize) -> &[u8] {
        let p = self.h * self.w;
        &self.data[i * p..(i + 1) * p]
    }

    pub fn item_map(&self, i: usize) -> LabelMap {
        LabelMap { n: 1, h: self.h, w: self.w, data: self.item(i).to_vec() }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= num_classes) {
            Some(v) => Err(Error::Data(format!("label {v} outside [0, {num_classes})"))),
            None => Ok(()),
        }
    }

    /// Stacks single-item maps along the batch axis.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::config("stack of zero label maps"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in maps {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::shape("label_map", format!("{}x{} vs {}x{}", m.h, m.w, first.h, first.w)));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        Ok(LabelMap { n, h: first.h, w: first.w, data })
    }
}

/// Which normalization the probability tensor obeys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbMode {
    /// Per-pixel simplex across channels.
    Softmax,
    /// Independent per-channel probabilities in `[0, 1]`.
    Sigmoid,
}

/// Predicted class probabilities `(n, num_classes, h, w)`.
#[derive(Clone, Debug)]
pub struct SoftPrediction<T: Scalar = f32> {
    probs: Tensor4<T>,
    mode: ProbMode,
}

impl<T: Scalar> SoftPrediction<T> {
    pub fn new(probs: Tensor4<T>, mode: ProbMode) -> Result<Self> {
        let s = probs.shape();
        if mode == ProbMode::Softmax {
            let p = s.plane();
            let tol = T::lit(1e-5);
            for n in 0..s.n {
                let item = probs.item(n);
                for i in 0..p {
                    let sum: T = (0..s.c).map(|c| item[c * p + i]).sum();
                    if (sum - T::one()).abs() > tol {
                        return Err(Error::Data(format!("softmax probabilities sum to {sum} at item {n} pixel {i}")));
                    }
                }
            }
        }
        if probs.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::Data("probability outside [0, 1]".into()));
        }
        Ok(SoftPrediction { probs, mode })
    }

    pub fn probs(&self) -> &Tensor4<T> {
        &self.probs
    }

    pub fn mode(&self) -> ProbMode {
        self.mode
    }
}

fn check_pair(s: Shape, gt: &LabelMap) -> Result<()> {
    if (s.n, s.h, s.w) != (gt.n, gt.h, gt.w) {
        return Err(Error::shape("loss", format!("prediction {s} vs labels {}x{}x{}", gt.n, gt.h, gt.w)));
    }
    gt.validate(s.c)
}

/// Gathers the probabilities of class `c` across the batch in `(n, y, x)` order.
fn class_column<T: Scalar>(probs: &Tensor4<T>, c: usize) -> Vec<T> {
    let s = probs.shape();
    (0..s.n).flat_map(|n| probs.plane(n, c).iter().copied()).collect()
}

fn scatter_column<T: Scalar>(dst: &mut Tensor4<T>, c: usize, col: &[T]) {
    let s = dst.shape();
    let p = s.plane();
    for n in 0..s.n {
        let st = dst.index(n, c, 0, 0);
        dst.data_mut()[st..st + p].copy_from_slice(&col[n * p..(n + 1) * p]);
    }
}

/// Dice loss of one class with its gradient w.r.t. the class probabilities.
pub fn dice_class_loss<T: Scalar>(p: &[T], g: &[bool], eps: T) -> (T, Vec<T>) {
    let two = T::lit(2.0);
    let mut inter = T::zero();
    let mut psum = T::zero();
    let mut gsum = T::zero();
    for (&pv, &gv) in p.iter().zip(g) {
        psum += pv;
        if gv {
            inter += pv;
            gsum += T::one();
        }
    }
    let num = two * inter + eps;
    let den = psum + gsum + eps;
    if den == T::zero() {
        return (T::zero(), vec![T::zero(); p.len()]);
    }
    let loss = T::one() - num / den;
    let den2 = den * den;
    let grad = g
        .iter()
        .map(|&gv| {
            let gi = if gv { two } else { T::zero() };
            -(gi * den - num) / den2
        })
        .collect();
    (loss, grad)
}

/// Mean per-class Dice loss over all classes, with its gradient.
pub fn dice_loss_with_grad<T: Scalar>(probs: &Tensor4<T>, gt: &GroundTruth, eps: T) -> Result<(T, Tensor4<T>)> {
    let s = probs.shape();
    check_pair(s, gt)?;
    let mut grad = Tensor4::zeros(s);
    let mut total = T::zero();
    let inv = T::one() / T::from_usize(s.c).unwrap();
    for c in 0..s.c {
        let p = class_column(probs, c);
        let g: Vec<bool> = gt.data().iter().map(|&v| v as usize == c).collect();
        let (l, dg) = dice_class_loss(&p, &g, eps);
        total += l;
        let dg: Vec<T> = dg.into_iter().map(|v| v * inv).collect();
        scatter_column(&mut grad, c, &dg);
    }
    Ok((total * inv, grad))
}

pub fn dice_loss<T: Scalar>(pred: &SoftPrediction<T>, gt: &GroundTruth, eps: T) -> Result<T> {
    dice_loss_with_grad(pred.probs(), gt, eps).map(|(l, _)| l)
}

fn descending_order<T: Scalar>(errors: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap_or(Ordering::Equal));
    order
}

fn class_errors<T: Scalar>(probs: &Tensor4<T>, gt: &GroundTruth, c: usize) -> (Vec<T>, Vec<bool>) {
    let p = class_column(probs, c);
    let fg: Vec<bool> = gt.data().iter().map(|&v| v as usize == c).collect();
    let errors = p.iter().zip(&fg).map(|(&pv, &f)| if f { T::one() - pv } else { pv }).collect();
    (errors, fg)
}

/// Lovász extension of the Jaccard loss for one class.
///
/// `errors[i]` is the per-pixel error and `fg[i]` marks ground-truth members.
/// Returns the loss and its gradient w.r.t. `errors`, treating the sort
/// permutation as fixed.
pub fn lovasz_class_loss<T: Scalar>(errors: &[T], fg: &[bool]) -> (T, Vec<T>) {
    let n = errors.len();
    if n == 0 {
        return (T::zero(), Vec::new());
    }
    let order = descending_order(errors);
    let gts = fg.iter().filter(|&&f| f).count();
    // Jaccard loss of the ground truth against the top-k error set.
    let mut jac = Vec::with_capacity(n);
    let mut fg_seen = 0usize;
    for (k, &i) in order.iter().enumerate() {
        if fg[i] {
            fg_seen += 1;
        }
        let inter = (gts - fg_seen) as f64;
        let union = (gts + (k + 1 - fg_seen)) as f64;
        jac.push(T::lit(1.0 - inter / union));
    }
    // Abel summation: sum_k (e_k - e_{k+1}) J(k), which is exact at vertices.
    let mut loss = T::zero();
    for k in 0..n {
        let next = if k + 1 < n { errors[order[k + 1]] } else { T::zero() };
        loss += (errors[order[k]] - next) * jac[k];
    }
    let mut grad = vec![T::zero(); n];
    for k in 0..n {
        let prev = if k == 0 { T::zero() } else { jac[k - 1] };
        grad[order[k]] = jac[k] - prev;
    }
    (loss, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMode {
    /// Average over every class.
    #[default]
    All,
    /// Average over classes present in the ground truth.
    Present,
}

/// Per-class Lovász losses, flattened over the batch.
pub fn lovasz_per_class<T: Scalar>(probs: &Tensor4<T>, gt: &GroundTruth) -> Result<Vec<(T, Vec<T>, bool)>> {
    let s = probs.shape();
    check_pair(s, gt)?;
    Ok((0..s.c)
        .map(|c| {
            let (errors, fg) = class_errors(probs, gt, c);
            let (l, de) = lovasz_class_loss(&errors, &fg);
            // d error / d p is -1 on foreground, +1 elsewhere.
            let dp = de.iter().zip(&fg).map(|(&d, &f)| if f { -d } else { d }).collect();
            (l, dp, fg.iter().any(|&f| f))
        })
        .collect())
}

pub fn lovasz_loss_with_grad<T: Scalar>(probs: &Tensor4<T>, gt: &GroundTruth, mode: ClassMode) -> Result<(T, Tensor4<T>)> {
    let per = lovasz_per_class(probs, gt)?;
    let mut grad = Tensor4::zeros(probs.shape());
    let used: Vec<usize> = per
        .iter()
        .enumerate()
        .filter(|(_, (_, _, present))| mode == ClassMode::All || *present)
        .map(|(c, _)| c)
        .collect();
    if used.is_empty() {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::from_usize(used.len()).unwrap();
    let mut total = T::zero();
    for &c in &used {
        let (l, dp, _) = &per[c];
        total += *l;
        let scaled: Vec<T> = dp.iter().map(|&v| v * inv).collect();
        scatter_column(&mut grad, c, &scaled);
    }
    Ok((total * inv, grad))
}

pub fn lovasz_loss<T: Scalar>(pred: &SoftPrediction<T>, gt: &GroundTruth, mode: ClassMode) -> Result<T> {
    lovasz_loss_with_grad(pred.probs(), gt, mode).map(|(l, _)| l)
}

/// Weights and smoothing of the combined training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub lovasz: f64,
    pub dice_eps: f64,
    pub class_mode: ClassMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dice: 1.0, lovasz: 1.0, dice_eps: 1.0, class_mode: ClassMode::All }
    }
}

pub fn combined_loss_with_grad<T: Scalar>(probs: &Tensor4<T>, gt: &GroundTruth, w: &LossWeights) -> Result<(T, Tensor4<T>)> {
    if w.dice < 0.0 || w.lovasz < 0.0 {
        return Err(Error::config("loss weights must be nonnegative"));
    }
    let (wd, wl) = (T::lit(w.dice), T::lit(w.lovasz));
    let mut grad = Tensor4::zeros(probs.shape());
    let mut total = T::zero();
    if w.dice > 0.0 {
        let (l, g) = dice_loss_with_grad(probs, gt, T::lit(w.dice_eps))?;
        total += wd * l;
        grad = grad.zip_map(&g, |a, b| a + wd * b);
    }
    if w.lovasz > 0.0 {
        let (l, g) = lovasz_loss_with_grad(probs, gt, w.class_mode)?;
        total += wl * l;
        grad = grad.zip_map(&g, |a, b| a + wl * b);
    }
    if w.dice == 0.0 && w.lovasz == 0.0 {
        check_pair(probs.shape(), gt)?;
    }
    Ok((total, grad))
}

pub fn combined_loss<T: Scalar>(pred: &SoftPrediction<T>, gt: &GroundTruth, w: &LossWeights) -> Result<T> {
    combined_loss_with_grad(pred.probs(), gt, w).map(|(l, _)| l)
}

/// Scalar node whose gradient was computed alongside its value.
struct PrecomputedLoss<T> {
    inputs: [Var; 1],
    grad: Tensor4<T>,
}

impl<T: Scalar> Backward<T> for PrecomputedLoss<T> {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn vjp(&self, _tape: &Tape<T>, _out: &Tensor4<T>, grad: &Tensor4<T>, _needs: &[bool]) -> Vec<Option<Tensor4<T>>> {
        let g = grad.data()[0];
        vec![Some(self.grad.map(|v| v * g))]
    }
}

/// Records the combined loss of `probs` on the tape.
pub fn combined_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, probs: Var, gt: &GroundTruth, w: &LossWeights) -> Result<Var> {
    let (l, g) = combined_loss_with_grad(tape.value(probs), gt, w)?;
    if w.lovasz > 0.0 && tape.branch_signature().is_some() {
        // The Lovász term is linear only while every class keeps its error order.
        let orders: Vec<Vec<usize>> = (0..tape.shape(probs).c).map(|c| descending_order(&class_errors(tape.value(probs), gt, c).0)).collect();
        tape.note_branch(&orders);
    }
    Ok(tape.push(Tensor4::scalar(l), Box::new(PrecomputedLoss { inputs: [probs], grad: g })))
}

/// Per-pixel argmax over channels; ties resolve to the lower class index.
pub fn argmax_mask<T: Scalar>(probs: &Tensor4<T>) -> LabelMap {
    let s = probs.shape();
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * p);
    for n in 0..s.n {
        let item = probs.item(n);
        for i in 0..p {
            let mut best = 0;
            for c in 1..s.c {
                if item[c * p + i] > item[best * p + i] {
                    best = c;
                }
            }
            data.push(best as u8);
        }
    }
    LabelMap { n: s.n, h: s.h, w: s.w, data }
}

/// Dice similarity of one class; 1.0 when both masks lack the class.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<f64> {
    if (pred.n, pred.h, pred.w) != (gt.n, gt.h, gt.w) {
        return Err(Error::shape("dsc", format!("{}x{}x{} vs {}x{}x{}", pred.n, pred.h, pred.w, gt.n, gt.h, gt.w)));
    }
    let (mut x, mut y, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (pa, pb) = (a == class_id, b == class_id);
        x += pa as usize;
        y += pb as usize;
        both += (pa && pb) as usize;
    }
    Ok(if x + y == 0 { 1.0 } else { 2.0 * both as f64 / (x + y) as f64 })
}

/// Per-class DSC plus their arithmetic mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub per_class_dsc: Vec<f64>,
    pub mdsc: f64,
}

impl MetricsRecord {
    pub fn from_per_class(per_class_dsc: Vec<f64>) -> Self {
        let mdsc = if per_class_dsc.is_empty() {
            0.0
        } else {
            per_class_dsc.iter().sum::<f64>() / per_class_dsc.len() as f64
        };
        MetricsRecord { per_class_dsc, mdsc }
    }

    pub fn csv_header(num_classes: usize) -> String {
        let mut cols = vec!["split".to_string(), "epoch".to_string()];
        for c in 0..num_classes {
            cols.push(match CLASS_NAMES.get(c) {
                Some(n) if num_classes == 4 => format!("dsc_{n}"),
                _ => format!("dsc_{c}"),
            });
        }
        cols.push("mdsc".into());
        cols.join(",")
    }

    /// `split,epoch,dsc_bg,dsc_irf,dsc_srf,dsc_ped,mdsc`
    pub fn csv_row(&self, split: &str, epoch: usize) -> String {
        let mut cols = vec![split.to_string(), epoch.to_string()];
        cols.extend(self.per_class_dsc.iter().map(|v| format!("{v:.6}")));
        cols.push(format!("{:.6}", self.mdsc));
        cols.join(",")
    }
}

/// Mean DSC over classes; with `include_background == false` class 0 is skipped.
pub fn mdsc(pred: &LabelMap, gt: &LabelMap, num_classes: usize, include_background: bool) -> Result<MetricsRecord> {
    if num_classes == 0 {
        return Err(Error::config("mdsc needs at least one class"));
    }
    let start = if include_background { 0 } else { 1 };
    let per = (start..num_classes).map(|c| dsc(pred, gt, c as u8)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsRecord::from_per_class(per))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(labels: &[u8], c: usize, h: usize, w: usize) -> Tensor4<f64> {
        Tensor4::from_fn([1, c, h, w], |_, k, y, x| if labels[y * w + x] as usize == k { 1.0 } else { 0.0 })
    }

    #[test]
    fn dice_perfect_prediction_is_zero() {
        let gt = LabelMap::new(1, 2, 2, vec![1; 4]).unwrap();
        let (l, _) = dice_loss_with_grad(&onehot(gt.data(), 2, 2, 2), &gt, 1.0).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn dice_class_examples() {
        let (l, _) = dice_class_loss(&[0.0f64; 4], &[true; 4], 1.0);
        assert!((l - 0.8).abs() < 1e-12);
        let (l, _) = dice_class_loss(&[1.0f64, 0.0], &[true, true], 0.0);
        assert!((l - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lovasz_single_pixel() {
        let (l, g) = lovasz_class_loss(&[0.4f64], &[true]);
        assert!((l - 0.4).abs() < 1e-15);
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn lovasz_perfect_prediction_is_zero() {
        let gt = LabelMap::new(1, 2, 3, vec![0, 1, 2, 3, 1, 0]).unwrap();
        let (l, _) = lovasz_loss_with_grad(&onehot(gt.data(), 4, 2, 3), &gt, ClassMode::All).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn empty_image_lovasz_is_zero() {
        assert_eq!(lovasz_class_loss::<f64>(&[], &[]).0, 0.0);
    }

    #[test]
    fn argmax_ties_go_to_lower_class() {
        let probs = Tensor4::<f32>::full([1, 4, 2, 2], 0.25);
        assert!(argmax_mask(&probs).data().iter().all(|&v| v == 0));
    }

    #[test]
    fn dsc_cases() {
        let a = LabelMap::new(1, 1, 4, vec![1, 1, 0, 0]).unwrap();
        let b = LabelMap::new(1, 1, 4, vec![0, 1, 1, 0]).unwrap();
        let c = LabelMap::new(1, 1, 4, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(dsc(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dsc(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(dsc(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dsc(&a, &b, 3).unwrap(), 1.0);
    }

    #[test]
    fn metrics_csv_row_shape() {
        let r = MetricsRecord::from_per_class(vec![1.0, 0.5, 0.25, 0.25]);
        assert_eq!(MetricsRecord::csv_header(4), "split,epoch,dsc_bg,dsc_irf,dsc_srf,dsc_ped,mdsc");
        assert_eq!(r.csv_row("test", 3), "test,3,1.000000,0.500000,0.250000,0.250000,0.500000");
    }

    #[test]
    fn softmax_prediction_validated() {
        let bad = Tensor4::<f32>::full([1, 2, 1, 1], 0.7);
        assert!(SoftPrediction::new(bad, ProbMode::Softmax).is_err());
        let ok = Tensor4::<f32>::full([1, 2, 1, 1], 0.5);
        assert!(SoftPrediction::new(ok, ProbMode::Softmax).is_ok());
    }
}
