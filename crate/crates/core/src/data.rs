//! Slice/mask datasets, preprocessing, seeded splitting, class statistics and
//! the synthetic OCT phantom generator.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::resize::nearest_index;
use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::tensor::Tensor4;

/// Number of label classes: background, IRF, SRF, PED.
pub const NUM_CLASSES: usize = 4;

/// Independent streams derived from one run seed. Every stochastic stage
/// draws from its own ChaCha8 stream so changing one stage leaves the others
/// untouched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Dropout = 3,
    Phantom = 4,
    Batches = 5,
    PriorInit = 6,
    PriorNoise = 7,
    Ablation = 8,
}

/// ChaCha8 seeded with `seed`, positioned on the stream of `stage`.
pub fn substream(seed: u64, stage: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stage as u64);
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceTag {
    Cirrus,
    Spectralis,
    Topcon,
    #[default]
    Phantom,
}

/// One 8-bit grayscale slice with its class mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSlice {
    pub name: String,
    pub image: GrayImage,
    pub mask: GrayImage,
    pub device: DeviceTag,
}

impl LabeledSlice {
    pub fn new(name: impl Into<String>, image: GrayImage, mask: GrayImage, device: DeviceTag) -> Result<Self> {
        let name = name.into();
        if image.dimensions() != mask.dimensions() {
            let (iw, ih) = image.dimensions();
            let (mw, mh) = mask.dimensions();
            return Err(Error::Data(format!("{name}: image {ih}x{iw} vs mask {mh}x{mw}")));
        }
        if let Some(v) = mask.as_raw().iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("{name}: mask value {v} outside 0..=3")));
        }
        Ok(LabeledSlice { name, image, mask, device })
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn has_foreground(&self) -> bool {
        self.mask.as_raw().iter().any(|&v| v != 0)
    }
}

/// Intensity ranges `[lo, hi]` in `[0, 1]` for each tissue type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityProfile {
    pub vitreous: (f64, f64),
    pub bright_band: (f64, f64),
    pub dark_band: (f64, f64),
    pub rpe: (f64, f64),
    pub choroid: (f64, f64),
    pub fluid: (f64, f64),
    pub ped: (f64, f64),
}

impl IntensityProfile {
    pub fn for_device(device: DeviceTag) -> Self {
        let base = IntensityProfile {
            vitreous: (0.03, 0.08),
            bright_band: (0.55, 0.75),
            dark_band: (0.30, 0.42),
            rpe: (0.85, 0.95),
            choroid: (0.35, 0.50),
            fluid: (0.02, 0.06),
            ped: (0.10, 0.16),
        };
        match device {
            DeviceTag::Spectralis => IntensityProfile { bright_band: (0.60, 0.80), rpe: (0.90, 0.98), ..base },
            DeviceTag::Topcon => IntensityProfile { dark_band: (0.25, 0.35), choroid: (0.30, 0.42), ..base },
            DeviceTag::Cirrus | DeviceTag::Phantom => base,
        }
    }
}

/// Nominal blob sizes as fractions of the slice size; each blob draws its
/// radii uniformly in `[0.8, 1.2]` times the nominal value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSizes {
    /// IRF ellipse half-axes `(rx / w, ry / h)`.
    pub irf: (f64, f64),
    /// SRF ellipse half-axes.
    pub srf: (f64, f64),
    /// PED dome half-width `/ w` and height `/ h`.
    pub ped: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `(h, w)` in pixels.
    pub size: (usize, usize),
    /// Retinal bands between the vitreous and the choroid; the last one is the RPE.
    pub n_layers: usize,
    /// Blob counts for IRF, SRF and PED.
    pub fluid_counts: [usize; 3],
    pub blob_sizes: BlobSizes,
    pub intensity: IntensityProfile,
    pub speckle_sigma: f64,
    pub device: DeviceTag,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomPreset {
    /// 64-pixel slices with boosted minority classes.
    #[default]
    Desk,
    /// 256-pixel slices whose class fractions follow the Cirrus statistics.
    Table1Faithful,
}

impl std::str::FromStr for PhantomPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(PhantomPreset::Desk),
            "table1-faithful" => Ok(PhantomPreset::Table1Faithful),
            other => Err(Error::config(format!("unknown phantom preset {other:?}; expected desk or table1-faithful"))),
        }
    }
}

impl PhantomSpec {
    pub fn preset(preset: PhantomPreset, seed: u64) -> Self {
        match preset {
            PhantomPreset::Desk => PhantomSpec {
                size: (64, 64),
                n_layers: 6,
                fluid_counts: [2, 1, 1],
                blob_sizes: BlobSizes { irf: (0.06, 0.045), srf: (0.11, 0.04), ped: (0.11, 0.06) },
                intensity: IntensityProfile::for_device(DeviceTag::Phantom),
                speckle_sigma: 0.15,
                device: DeviceTag::Phantom,
                seed,
            },
            PhantomPreset::Table1Faithful => PhantomSpec {
                size: (256, 256),
                n_layers: 6,
                fluid_counts: [1, 1, 1],
                blob_sizes: BlobSizes { irf: (0.012, 0.012), srf: (0.055, 0.0105), ped: (0.15, 0.034) },
                intensity: IntensityProfile::for_device(DeviceTag::Cirrus),
                speckle_sigma: 0.25,
                device: DeviceTag::Phantom,
                seed,
            },
        }
    }

    pub fn fluid_free(mut self) -> Self {
        self.fluid_counts = [0; 3];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        let mut problems = Vec::new();
        if h < 16 || w < 16 {
            problems.push(format!("phantom size {h}x{w} below 16x16"));
        }
        if !(2..=12).contains(&self.n_layers) {
            problems.push(format!("n_layers must be in 2..=12, got {}", self.n_layers));
        }
        if !(self.speckle_sigma.is_finite() && self.speckle_sigma >= 0.0) {
            problems.push(format!("speckle_sigma must be finite and non-negative, got {}", self.speckle_sigma));
        }
        let b = &self.blob_sizes;
        for (name, (a, c)) in [("irf", b.irf), ("srf", b.srf), ("ped", b.ped)] {
            if !(a > 0.0 && c > 0.0 && a < 0.5 && c < 0.5) {
                problems.push(format!("{name} blob size ({a}, {c}) must lie in (0, 0.5)"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

/// Vertical retinal geometry of one column.
#[derive(Clone, Debug)]
struct Column {
    /// Band boundaries, top of band 0 through bottom of the RPE.
    bounds: Vec<f64>,
}

impl Column {
    fn rpe_top(&self) -> f64 {
        self.bounds[self.bounds.len() - 2]
    }

    fn rpe_bottom(&self) -> f64 {
        self.bounds[self.bounds.len() - 1]
    }

    fn top(&self) -> f64 {
        self.bounds[0]
    }
}

const MAX_ATTEMPTS: usize = 100;

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws one synthetic B-scan. Fluid is dark (hypo-reflective): IRF blobs sit
/// inside the middle bands, SRF lenses sit directly above the RPE, and PED
/// domes lift the RPE over a dim cavity.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<LabeledSlice> {
    spec.validate()?;
    let (h, w) = spec.size;
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Curved band stack with per-slice jitter in thickness and curvature.
    let thickness = hf * uniform(&mut rng, (0.38, 0.44));
    let mut rel: Vec<f64> = (0..spec.n_layers).map(|_| uniform(&mut rng, (0.7, 1.3))).collect();
    let last = rel.len() - 1;
    rel[last] = 0.45;
    let total: f64 = rel.iter().sum();
    let top0 = hf * uniform(&mut rng, (0.22, 0.30));
    let amp = hf * uniform(&mut rng, (0.01, 0.05));
    let phase = uniform(&mut rng, (0.0, std::f64::consts::TAU));
    let freq = uniform(&mut rng, (0.5, 1.2));
    let mut columns: Vec<Column> = (0..w)
        .map(|x| {
            let t = x as f64 / wf;
            let top = top0 + amp * (std::f64::consts::TAU * freq * t + phase).sin();
            let mut bounds = vec![top];
            let mut acc = top;
            for r in &rel {
                acc += thickness * r / total;
                bounds.push(acc);
            }
            Column { bounds }
        })
        .collect();

    let p = &spec.intensity;
    let band_level: Vec<f64> = (0..spec.n_layers)
        .map(|k| {
            if k == last {
                uniform(&mut rng, p.rpe)
            } else if k % 2 == 0 {
                uniform(&mut rng, p.bright_band)
            } else {
                uniform(&mut rng, p.dark_band)
            }
        })
        .collect();
    let vitreous = uniform(&mut rng, p.vitreous);
    let choroid = uniform(&mut rng, p.choroid);
    let fluid = uniform(&mut rng, p.fluid);
    let ped_level = uniform(&mut rng, p.ped);

    let mut mask = vec![0u8; h * w];
    let sizes = &spec.blob_sizes;
    let jitter = |rng: &mut ChaCha8Rng, v: f64, scale: f64| v * scale * uniform(rng, (0.8, 1.2));

    // PED: lift the RPE by a dome profile; the gap below becomes the cavity.
    let mut lift = vec![0.0f64; w];
    for _ in 0..spec.fluid_counts[2] {
        let mut shrink = 1.0;
        let mut placed = false;
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 && attempt % 10 == 0 {
                shrink *= 0.9;
            }
            let rx = jitter(&mut rng, sizes.ped.0 * wf, shrink).max(1.5);
            let ht = jitter(&mut rng, sizes.ped.1 * hf, shrink).max(1.5);
            if 2.0 * rx + 2.0 >= wf {
                continue;
            }
            let cx = uniform(&mut rng, (rx + 1.0, wf - rx - 1.0));
            let x0 = (cx - rx).floor() as usize;
            let x1 = ((cx + rx).ceil() as usize).min(w - 1);
            if (x0.saturating_sub(2)..=(x1 + 2).min(w - 1)).any(|x| lift[x] > 0.0) {
                continue;
            }
            for (x, l) in lift.iter_mut().enumerate().take(x1 + 1).skip(x0) {
                let u = (x as f64 + 0.5 - cx) / rx;
                if u.abs() < 1.0 {
                    *l = ht * (1.0 - u * u).sqrt();
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Data(format!("class 3 blob did not fit after {MAX_ATTEMPTS} attempts")));
        }
    }
    for (x, col) in columns.iter_mut().enumerate() {
        if lift[x] <= 0.0 {
            continue;
        }
        let old_bottom = col.rpe_bottom();
        // The whole stack rises with the RPE so the dome stays continuous.
        for b in col.bounds.iter_mut() {
            *b -= lift[x];
        }
        let lo = col.rpe_bottom();
        for y in 0..h {
            let yc = y as f64 + 0.5;
            if yc >= lo && yc < old_bottom {
                mask[y * w + x] = 3;
            }
        }
    }

    keep_largest_components(&mut mask, (h, w), 3, spec.fluid_counts[2]);

    // SRF: flattened ellipses hugging the top of the RPE.
    place_ellipses(&mut rng, &mut mask, (h, w), spec.fluid_counts[1], sizes.srf, 2, |rng, rx, ry| {
        let cx = uniform(rng, (rx, wf - rx));
        let col = &columns[(cx as usize).min(w - 1)];
        Some((cx, col.rpe_top() - ry))
    })?;

    // IRF: ellipses centered in the middle of the band stack.
    place_ellipses(&mut rng, &mut mask, (h, w), spec.fluid_counts[0], sizes.irf, 1, |rng, rx, ry| {
        let cx = uniform(rng, (rx, wf - rx));
        let col = &columns[(cx as usize).min(w - 1)];
        let (top, bottom) = (col.top(), col.rpe_top());
        let span = bottom - top;
        let (lo, hi) = (top + 0.3 * span + ry, top + 0.7 * span - ry);
        if hi <= lo {
            return None;
        }
        Some((cx, uniform(rng, (lo, hi))))
    })?;

    // Render tissue, then overwrite fluid, then speckle.
    let speckle = Normal::new(0.0, spec.speckle_sigma.max(1e-12)).map_err(|e| Error::config(e.to_string()))?;
    let mut pixels = vec![0u8; h * w];
    for y in 0..h {
        let yc = y as f64 + 0.5;
        for (x, col) in columns.iter().enumerate() {
            let label = mask[y * w + x];
            let base = match label {
                1 | 2 => fluid,
                3 => ped_level,
                _ => {
                    if yc < col.top() {
                        vitreous
                    } else if yc >= col.rpe_bottom() {
                        let depth = (yc - col.rpe_bottom()) / hf;
                        choroid * (1.0 - 1.5 * depth).max(0.3)
                    } else {
                        let k = col.bounds.windows(2).position(|b| yc >= b[0] && yc < b[1]).unwrap_or(last);
                        band_level[k]
                    }
                }
            };
            let noise = if spec.speckle_sigma > 0.0 { speckle.sample(&mut rng).exp() } else { 1.0 };
            pixels[y * w + x] = (base * noise * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    let image = GrayImage::from_raw(w as u32, h as u32, pixels).ok_or_else(|| Error::Data("phantom buffer size".into()))?;
    let mask = GrayImage::from_raw(w as u32, h as u32, mask).ok_or_else(|| Error::Data("phantom buffer size".into()))?;
    LabeledSlice::new(format!("phantom_{:016x}", spec.seed), image, mask, spec.device)
}

/// Places `count` ellipses of class `label` whose centers come from `center`,
/// keeping a one-pixel gap to every existing fluid pixel. The radii shrink by
/// 10 % every ten failed attempts.
fn place_ellipses(
    rng: &mut ChaCha8Rng,
    mask: &mut [u8],
    (h, w): (usize, usize),
    count: usize,
    nominal: (f64, f64),
    label: u8,
    mut center: impl FnMut(&mut ChaCha8Rng, f64, f64) -> Option<(f64, f64)>,
) -> Result<()> {
    let (hf, wf) = (h as f64, w as f64);
    for _ in 0..count {
        let mut shrink = 1.0;
        let mut placed = false;
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 && attempt % 10 == 0 {
                shrink *= 0.9;
            }
            let rx = (nominal.0 * wf * shrink * uniform(rng, (0.8, 1.2))).max(1.0);
            let ry = (nominal.1 * hf * shrink * uniform(rng, (0.8, 1.2))).max(1.0);
            let Some((cx, cy)) = center(rng, rx, ry) else { continue };
            if cy - ry < 0.0 || cy + ry > hf {
                continue;
            }
            let inside = |x: usize, y: usize, grow: f64| {
                let dx = (x as f64 + 0.5 - cx) / (rx + grow);
                let dy = (y as f64 + 0.5 - cy) / (ry + grow);
                dx * dx + dy * dy <= 1.0
            };
            let y0 = (cy - ry - 2.0).floor().max(0.0) as usize;
            let y1 = ((cy + ry + 2.0).ceil() as usize).min(h - 1);
            let x0 = (cx - rx - 2.0).floor().max(0.0) as usize;
            let x1 = ((cx + rx + 2.0).ceil() as usize).min(w - 1);
            let clash = (y0..=y1).any(|y| (x0..=x1).any(|x| mask[y * w + x] != 0 && inside(x, y, 1.5)));
            let area = (y0..=y1).map(|y| (x0..=x1).filter(|&x| inside(x, y, 0.0)).count()).sum::<usize>();
            if clash || area == 0 {
                continue;
            }
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if inside(x, y, 0.0) {
                        mask[y * w + x] = label;
                    }
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Data(format!("class {label} blob did not fit after {MAX_ATTEMPTS} attempts")));
        }
    }
    Ok(())
}

/// Clears all but the `keep` largest 4-connected components of `label`.
/// Thin dome edges can otherwise leave detached one-pixel slivers.
fn keep_largest_components(mask: &mut [u8], (h, w): (usize, usize), label: u8, keep: usize) {
    let mut comp = vec![usize::MAX; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask[start] != label || comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        comp[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let neighbors = [(x > 0).then(|| i - 1), (x + 1 < w).then(|| i + 1), (y > 0).then(|| i - w), (y + 1 < h).then(|| i + w)];
            for j in neighbors.into_iter().flatten() {
                if mask[j] == label && comp[j] == usize::MAX {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
    }
    if sizes.len() <= keep {
        return;
    }
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut kept = vec![false; sizes.len()];
    for &id in order.iter().take(keep) {
        kept[id] = true;
    }
    for (m, &c) in mask.iter_mut().zip(&comp) {
        if *m == label && !kept[c] {
            *m = 0;
        }
    }
}

/// `count` phantoms whose seeds come from the phantom stream of `seed`.
pub fn phantom_corpus(preset: PhantomPreset, count: usize, seed: u64, fluid_free: bool) -> Result<Vec<LabeledSlice>> {
    let mut rng = substream(seed, Stream::Phantom);
    (0..count)
        .map(|i| {
            let mut spec = PhantomSpec::preset(preset, rng.next_u64());
            if fluid_free {
                spec = spec.fluid_free();
            }
            let mut s = generate_phantom(&spec)?;
            s.name = format!("phantom_{i:05}");
            Ok(s)
        })
        .collect()
}

/// 4-connected component count of each foreground class.
pub fn component_counts(mask: &GrayImage) -> [usize; NUM_CLASSES] {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let data = mask.as_raw();
    let mut seen = vec![false; w * h];
    let mut counts = [0; NUM_CLASSES];
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || data[start] == 0 {
            continue;
        }
        let label = data[start];
        counts[label as usize] += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && data[j] == label {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    counts
}

/// Per-class pixel fractions over a dataset.
pub fn class_stats(ds: &[LabeledSlice]) -> Result<[f64; NUM_CLASSES]> {
    if ds.is_empty() {
        return Err(Error::Data("class statistics of an empty dataset".into()));
    }
    let mut counts = [0u64; NUM_CLASSES];
    for s in ds {
        for &v in s.mask.as_raw() {
            counts[v as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    Ok(counts.map(|c| c as f64 / total as f64))
}

fn is_image_file(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("png" | "pgm"))
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.into_luma8())
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Loads `root/images/*` with the same-named files in `root/masks/`.
pub fn load_dataset(root: &Path) -> Result<Vec<LabeledSlice>> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for d in [&images_dir, &masks_dir] {
        if !d.is_dir() {
            return Err(Error::Data(format!("missing directory {}", d.display())));
        }
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&images_dir)
        .map_err(|e| Error::io(&images_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        log::warn!("no images under {}", images_dir.display());
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let file_name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        let mask_path = masks_dir.join(&file_name);
        if !mask_path.is_file() {
            return Err(Error::Data(format!("missing mask for image {file_name}")));
        }
        let image = read_gray(&path)?;
        let mask = read_gray(&mask_path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(file_name);
        out.push(LabeledSlice::new(stem, image, mask, DeviceTag::Phantom)?);
    }
    if let Ok(stats) = class_stats(&out) {
        log::info!("loaded {} slices from {}, class fractions {:?}", out.len(), root.display(), stats);
    }
    Ok(out)
}

/// Writes the dataset layout as PNG files named after each slice.
pub fn save_dataset(root: &Path, ds: &[LabeledSlice]) -> Result<()> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for d in [&images_dir, &masks_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in ds {
        write_gray(&images_dir.join(format!("{}.png", s.name)), &s.image)?;
        write_gray(&masks_dir.join(format!("{}.png", s.name)), &s.mask)?;
    }
    Ok(())
}

/// Writes a phantom corpus plus `manifest.txt`.
pub fn export_phantoms(root: &Path, preset: PhantomPreset, count: usize, seed: u64, fluid_free: bool) -> Result<Vec<LabeledSlice>> {
    let ds = phantom_corpus(preset, count, seed, fluid_free)?;
    save_dataset(root, &ds)?;
    let mut spec = PhantomSpec::preset(preset, seed);
    if fluid_free {
        spec = spec.fluid_free();
    }
    let mut manifest = String::new();
    let _ = writeln!(manifest, "seed = {seed}");
    let _ = writeln!(manifest, "count = {count}");
    let _ = writeln!(manifest, "preset = {preset:?}");
    let _ = writeln!(manifest, "fluid_free = {fluid_free}");
    let _ = writeln!(manifest, "size = {:?}", spec.size);
    let _ = writeln!(manifest, "n_layers = {}", spec.n_layers);
    let _ = writeln!(manifest, "fluid_counts = {:?}", spec.fluid_counts);
    let _ = writeln!(manifest, "blob_sizes = {:?}", spec.blob_sizes);
    let _ = writeln!(manifest, "intensity = {:?}", spec.intensity);
    let _ = writeln!(manifest, "speckle_sigma = {}", spec.speckle_sigma);
    if let Ok(f) = class_stats(&ds) {
        let _ = writeln!(manifest, "class_fractions = bg {:.6} irf {:.6} srf {:.6} ped {:.6}", f[0], f[1], f[2], f[3]);
    }
    let path = root.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}

/// Nearest-neighbor resize with floor index mapping.
pub fn resize_nearest(img: &GrayImage, (h, w): (usize, usize)) -> GrayImage {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let sx = nearest_index(x as usize, sw, w);
        let sy = nearest_index(y as usize, sh, h);
        *img.get_pixel(sx as u32, sy as u32)
    })
}

/// Resizes to `target`, scales to `[0, 1]` and replicates to three channels.
pub fn preprocess_image(img: &GrayImage, target: (usize, usize)) -> Result<Tensor4<f32>> {
    check_target(target)?;
    let r = resize_nearest(img, target);
    let (h, w) = target;
    Ok(Tensor4::from_fn([1, 3, h, w], |_, _, y, x| r.get_pixel(x as u32, y as u32)[0] as f32 / 255.0))
}

pub fn preprocess(s: &LabeledSlice, target: (usize, usize)) -> Result<(Tensor4<f32>, LabelMap)> {
    let image = preprocess_image(&s.image, target)?;
    let m = resize_nearest(&s.mask, target);
    let mask = LabelMap::new(1, target.0, target.1, m.into_raw())?;
    Ok((image, mask))
}

fn check_target((h, w): (usize, usize)) -> Result<()> {
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::config(format!("target {h}x{w} must be positive multiples of 16")));
    }
    Ok(())
}

/// A preprocessed dataset held as one image tensor and one label map.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub images: Tensor4<f32>,
    pub masks: LabelMap,
    pub names: Vec<String>,
}

impl Prepared {
    pub fn new(ds: &[LabeledSlice], target: (usize, usize)) -> Result<Self> {
        check_target(target)?;
        let (h, w) = target;
        let mut images = Vec::with_capacity(ds.len() * 3 * h * w);
        let mut masks = Vec::with_capacity(ds.len() * h * w);
        for s in ds {
            let (img, m) = preprocess(s, target)?;
            images.extend_from_slice(img.data());
            masks.extend_from_slice(m.data());
        }
        Ok(Prepared {
            images: Tensor4::from_vec([ds.len(), 3, h, w], images)?,
            masks: LabelMap::new(ds.len(), h, w, masks)?,
            names: ds.iter().map(|s| s.name.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Images and labels of the listed items, in list order.
    pub fn gather(&self, ids: &[usize]) -> Result<(Tensor4<f32>, LabelMap)> {
        let s = self.images.shape();
        let mut img = Vec::with_capacity(ids.len() * 3 * s.h * s.w);
        let mut lab = Vec::with_capacity(ids.len() * s.h * s.w);
        for &i in ids {
            if i >= self.len() {
                return Err(Error::Data(format!("item {i} out of range for {} slices", self.len())));
            }
            img.extend_from_slice(self.images.item(i));
            lab.extend_from_slice(self.masks.item(i));
        }
        Ok((Tensor4::from_vec([ids.len(), s.c, s.h, s.w], img)?, LabelMap::new(ids.len(), s.h, s.w, lab)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub seed: u64,
    pub ratio: f64,
}

/// Seeded shuffle of `0..n` on the split stream, then a prefix of
/// `round(n * ratio)` items for training.
pub fn split(n: usize, ratio: f64, seed: u64) -> Result<SplitPlan> {
    if n == 0 {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut substream(seed, Stream::Split));
    let n_train = ((n as f64 * ratio).round() as usize).clamp(1, n);
    let test_ids = ids.split_off(n_train);
    Ok(SplitPlan { train_ids: ids, test_ids, seed, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_phantom() {
        let spec = PhantomSpec::preset(PhantomPreset::Desk, 42);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomSpec::preset(PhantomPreset::Desk, 43)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn fluid_free_phantom_is_all_background() {
        for seed in 0..20 {
            let s = generate_phantom(&PhantomSpec::preset(PhantomPreset::Desk, seed).fluid_free()).unwrap();
            assert!(!s.has_foreground());
        }
    }

    #[test]
    fn components_match_fluid_counts() {
        for seed in 0..50 {
            let spec = PhantomSpec::preset(PhantomPreset::Desk, seed);
            let s = generate_phantom(&spec).unwrap();
            let c = component_counts(&s.mask);
            assert_eq!(&c[1..], &spec.fluid_counts[..], "seed {seed}");
        }
    }

    #[test]
    fn desk_fractions_in_window() {
        let ds = phantom_corpus(PhantomPreset::Desk, 100, 7, false).unwrap();
        let f = class_stats(&ds).unwrap();
        assert!((0.95..=0.995).contains(&f[0]), "{f:?}");
        for (c, v) in f.iter().enumerate().skip(1) {
            assert!(*v >= 0.005, "class {c}: {f:?}");
        }
    }

    #[test]
    fn table1_faithful_fractions() {
        let ds = phantom_corpus(PhantomPreset::Table1Faithful, 500, 11, false).unwrap();
        let f = class_stats(&ds).unwrap();
        assert!((0.985..=0.995).contains(&f[0]), "{f:?}");
        assert!(f[3] > f[2] && f[2] > f[1], "{f:?}");
    }

    #[test]
    fn fluid_is_darker_than_surrounding_tissue() {
        let ds = phantom_corpus(PhantomPreset::Desk, 20, 8, false).unwrap();
        let mut sums = [0.0f64; NUM_CLASSES];
        let mut counts = [0usize; NUM_CLASSES];
        for s in &ds {
            for (&p, &m) in s.image.as_raw().iter().zip(s.mask.as_raw()) {
                sums[m as usize] += p as f64;
                counts[m as usize] += 1;
            }
        }
        let mean: Vec<f64> = (0..NUM_CLASSES).map(|c| sums[c] / counts[c] as f64).collect();
        assert!(mean[1] < mean[0] && mean[2] < mean[0] && mean[3] < mean[0], "{mean:?}");
    }

    #[test]
    fn class_stats_examples() {
        let one = |mask: Vec<u8>, h, w| {
            LabeledSlice::new("t", GrayImage::new(w, h), GrayImage::from_raw(w, h, mask).unwrap(), DeviceTag::Phantom).unwrap()
        };
        assert_eq!(class_stats(&[one(vec![0; 4], 2, 2)]).unwrap(), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(class_stats(&[one(vec![0, 1, 0, 0], 2, 2)]).unwrap(), [0.75, 0.25, 0.0, 0.0]);
        assert!(class_stats(&[]).is_err());
    }

    #[test]
    fn class_stats_match_histogram() {
        let ds = phantom_corpus(PhantomPreset::Desk, 10, 9, false).unwrap();
        let mut hist = [0usize; 256];
        for s in &ds {
            for &v in s.mask.as_raw() {
                hist[v as usize] += 1;
            }
        }
        let total: usize = hist.iter().sum();
        let f = class_stats(&ds).unwrap();
        for c in 0..NUM_CLASSES {
            assert_eq!(f[c], hist[c] as f64 / total as f64);
        }
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn slice_rejects_bad_masks() {
        let err = LabeledSlice::new("a", GrayImage::new(4, 3), GrayImage::new(4, 4), DeviceTag::Phantom).unwrap_err().to_string();
        assert!(err.contains("3x4") && err.contains("4x4"), "{err}");
        let bad = GrayImage::from_raw(2, 1, vec![0, 4]).unwrap();
        assert!(LabeledSlice::new("b", GrayImage::new(2, 1), bad, DeviceTag::Phantom).is_err());
    }

    #[test]
    fn preprocess_scaling_and_index_map() {
        let img = GrayImage::from_fn(1024, 512, |x, y| image::Luma([((x * 7 + y * 13) % 256) as u8]));
        let mask = GrayImage::from_fn(1024, 512, |x, y| image::Luma([((x / 100 + y / 100) % 4) as u8]));
        let s = LabeledSlice::new("s", img.clone(), mask.clone(), DeviceTag::Cirrus).unwrap();
        let (t, m) = preprocess(&s, (256, 256)).unwrap();
        assert_eq!(t.shape().dims(), [1, 3, 256, 256]);
        for &(y, x) in &[(0usize, 0usize), (17, 250), (255, 255), (128, 3)] {
            let (sy, sx) = (y * 512 / 256, x * 1024 / 256);
            let v = img.get_pixel(sx as u32, sy as u32)[0] as f32 / 255.0;
            for c in 0..3 {
                assert_eq!(t.at(0, c, y, x), v);
            }
            assert_eq!(m.item(0)[y * 256 + x], mask.get_pixel(sx as u32, sy as u32)[0]);
        }
        let white = LabeledSlice::new("w", GrayImage::from_pixel(16, 16, image::Luma([255])), GrayImage::new(16, 16), DeviceTag::Phantom).unwrap();
        let (t, _) = preprocess(&white, (16, 16)).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
        assert!(preprocess(&white, (20, 16)).is_err());
    }

    #[test]
    fn preprocess_is_identity_at_target_size() {
        let s = generate_phantom(&PhantomSpec::preset(PhantomPreset::Desk, 3)).unwrap();
        assert_eq!(resize_nearest(&s.image, (64, 64)), s.image);
        let (_, m) = preprocess(&s, (64, 64)).unwrap();
        assert_eq!(m.data(), s.mask.as_raw().as_slice());
    }

    #[test]
    fn split_examples() {
        let p = split(10, 0.8, 1).unwrap();
        assert_eq!((p.train_ids.len(), p.test_ids.len()), (8, 2));
        assert_eq!(p, split(10, 0.8, 1).unwrap());
        let differing = (0..20u64).filter(|&s| split(10, 0.8, s).unwrap().train_ids != split(10, 0.8, s + 100).unwrap().train_ids).count();
        assert!(differing >= 19);
        assert!(split(0, 0.8, 1).is_err());
        assert!(split(5, 1.0, 1).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = export_phantoms(dir.path(), PhantomPreset::Desk, 3, 5, false).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in ds.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
        }
        assert!(std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap().contains("seed = 5"));
    }

    #[test]
    fn pgm_files_load() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        let img = GrayImage::from_fn(5, 4, |x, y| image::Luma([(x * 40 + y) as u8]));
        let mask = GrayImage::from_fn(5, 4, |x, _| image::Luma([(x % 4) as u8]));
        write_gray(&dir.path().join("images/a.pgm"), &img).unwrap();
        write_gray(&dir.path().join("masks/a.pgm"), &mask).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds[0].image, img);
        assert_eq!(ds[0].mask, mask);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
        write_gray(&dir.path().join("images/x.png"), &GrayImage::new(4, 4)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("x.png"), "{err}");
        write_gray(&dir.path().join("masks/x.png"), &GrayImage::from_pixel(4, 4, image::Luma([7]))).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn substreams_are_independent() {
        let a: u64 = substream(1, Stream::Split).next_u64();
        let b: u64 = substream(1, Stream::Init).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, substream(1, Stream::Split).next_u64());
    }
}
