//! Decoder-path heatmap export as 8-bit PGM files.

use std::path::{Path, PathBuf};

use image::GrayImage;

use crate::data::write_gray;
use crate::diffcore::Mode;
use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::net::{SegModel, STAGE_NAMES};
use crate::nn::{ParamStore, Session};
use crate::tensor::Tensor4;

/// File stems in export order.
pub const HEATMAP_FILES: [&str; 6] = ["gt", "aspp", "up6", "up7", "up8", "up9"];

/// Min-max normalizes one map to `0..=255`; a constant map becomes all zeros.
pub fn normalize_map(values: &[f32], h: usize, w: usize) -> Result<GrayImage> {
    if values.len() != h * w {
        return Err(Error::shape("heatmap", format!("{} values for {h}x{w}", values.len())));
    }
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let px = values
        .iter()
        .map(|&v| if span > 0.0 && span.is_finite() { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    GrayImage::from_raw(w as u32, h as u32, px).ok_or_else(|| Error::shape("heatmap", "buffer size".to_string()))
}

/// Mean absolute activation over channels of item `n`.
fn channel_mean_abs(t: &Tensor4<f32>, n: usize) -> Vec<f32> {
    let s = t.shape();
    let mut out = vec![0.0f32; s.h * s.w];
    for c in 0..s.c {
        for (o, &v) in out.iter_mut().zip(t.plane(n, c)) {
            *o += v.abs();
        }
    }
    out.iter_mut().for_each(|o| *o /= s.c as f32);
    out
}

/// Writes `gt`, `aspp` and `up6..up9` maps for every batch item: plain
/// `<stage>.pgm` for a single item, `<stage>_<index>.pgm` otherwise. The
/// ASPP map is the channel-mean feature magnitude; stage maps are the gate
/// attention maps, or the channel-mean fused features when gates are
/// disabled. The ground truth is written with class `k` as gray `85·k`.
pub fn export_heatmaps(
    model: &SegModel,
    store: &mut ParamStore<f32>,
    images: &Tensor4<f32>,
    prior_input: Option<&Tensor4<f32>>,
    gt: &LabelMap,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let n = images.shape().n;
    if gt.n != n {
        return Err(Error::shape("heatmap", format!("{} labels for {n} images", gt.n)));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut s = Session::new(store, Mode::Eval).frozen();
    let x = s.input(images.clone());
    let p = prior_input.map(|t| s.input(t.clone()));
    let out = model.forward(&mut s, x, p)?;
    let name = |stem: &str, i: usize| if n == 1 { format!("{stem}.pgm") } else { format!("{stem}_{i}.pgm") };
    let mut written = Vec::new();
    for i in 0..n {
        let mut maps: Vec<(&str, GrayImage)> = Vec::with_capacity(HEATMAP_FILES.len());
        let g: Vec<u8> = gt.item(i).iter().map(|&v| v.saturating_mul(85)).collect();
        maps.push(("gt", GrayImage::from_raw(gt.w as u32, gt.h as u32, g).ok_or_else(|| Error::shape("heatmap", "gt size".to_string()))?));
        let a = s.value(out.taps.aspp);
        let sh = a.shape();
        maps.push(("aspp", normalize_map(&channel_mean_abs(a, i), sh.h, sh.w)?));
        for (stage, tap) in STAGE_NAMES.iter().zip(&out.taps.stages) {
            let t = s.value(tap.alpha.unwrap_or(tap.fused));
            let sh = t.shape();
            let v = if tap.alpha.is_some() { t.plane(i, 0).to_vec() } else { channel_mean_abs(t, i) };
            maps.push((stage, normalize_map(&v, sh.h, sh.w)?));
        }
        for (stem, img) in maps {
            let path = out_dir.join(name(stem, i));
            write_gray(&path, &img)?;
            written.push(path);
        }
    }
    Ok(written)
}
