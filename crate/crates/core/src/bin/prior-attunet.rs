use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use prior_attunet::data::{self, load_dataset, split, LabeledSlice, PhantomPreset, Prepared};
use prior_attunet::losses::CLASS_NAMES;
use prior_attunet::runtime::config::Preset;
use prior_attunet::runtime::train::{load_prior, prior_checkpoint, segmentation_checkpoint, target_labels};
use prior_attunet::runtime::{self, export_heatmaps, pretrain_prior, run_ablation, train_segmentation, AblationAxis, Checkpoint, EvalReport, LoadedModel, RunConfig};

#[derive(Parser)]
#[command(name = "prior-attunet", version, about = "Prior-guided attention U-Net for retinal OCT fluid segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    #[value(name = "table1-faithful")]
    Table1Faithful,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic phantom corpus (images/, masks/, manifest.txt).
    GenPhantoms {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Emit slices without any fluid (prior pretraining corpus).
        #[arg(long)]
        fluid_free: bool,
        #[arg(long, value_enum, default_value = "desk")]
        preset: PresetArg,
    },
    /// Pretrain the VAE prior on fluid-free slices.
    PretrainPrior {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration; all keys default to the full preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the segmentation network; writes the best checkpoint and a metrics CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained prior checkpoint; required when the prior consumes reconstructions.
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Predict the class mask of one image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train variants along one axis over several seeds and write a comparison CSV.
    Ablate {
        /// prior, attention, gate_variant, ratio, aspp, conv_kind, normnet_source or normnet_midc.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; defaults to every value of the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Labeled dataset; a desk phantom corpus is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Fluid-free dataset for the prior; generated when omitted.
        #[arg(long)]
        prior_data: Option<PathBuf>,
        /// Size of generated labeled corpora.
        #[arg(long, default_value_t = 300)]
        count: usize,
        /// Size of generated fluid-free corpora.
        #[arg(long, default_value_t = 200)]
        prior_count: usize,
    },
    /// Export ground-truth, ASPP and decoder attention maps for one image.
    Heatmaps {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth mask; the predicted mask is written as gt.pgm when omitted.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print every configuration key with its default.
    PrintConfig {
        #[arg(long, value_enum, default_value = "desk")]
        preset: PresetKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetKind {
    Desk,
    Full,
}

impl From<PresetKind> for Preset {
    fn from(p: PresetKind) -> Self {
        match p {
            PresetKind::Desk => Preset::Desk,
            PresetKind::Full => Preset::Full,
        }
    }
}

fn config_help() -> String {
    let mut out = String::from(
        "Config files are flat TOML. `preset = \"desk\"` or `\"full\"` selects the defaults the other keys override.\n\nKeys (full default / desk default):\n",
    );
    let (Ok(full), Ok(desk)) = (RunConfig::documented_keys(Preset::Full), RunConfig::documented_keys(Preset::Desk)) else {
        return out;
    };
    for ((k, f), (_, d)) in full.iter().zip(&desk) {
        if f == d {
            out.push_str(&format!("  {k} = {f}\n"));
        } else {
            out.push_str(&format!("  {k} = {f} / {d}\n"));
        }
    }
    out.push_str(&format!("\n{} caps internal parallelism (all kernels run on one thread).\n", runtime::THREADS_ENV));
    out
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(dir: &Path) -> Result<Vec<LabeledSlice>> {
    let ds = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if ds.is_empty() {
        bail!("no slices found under {}", dir.display());
    }
    Ok(ds)
}

fn print_report(label: &str, r: &EvalReport) {
    let classes = r.slice_macro.per_class_dsc.len();
    let names: Vec<String> = (0..classes).map(|c| if classes == 4 { CLASS_NAMES[c].to_string() } else { c.to_string() }).collect();
    for (agg, m) in [("slice-macro", &r.slice_macro), ("pixel-pooled", &r.pixel_pooled)] {
        let cols: Vec<String> = names.iter().zip(&m.per_class_dsc).map(|(n, v)| format!("{n} {v:.4}")).collect();
        println!("{label} {agg}: {} | mDSC {:.4}", cols.join(", "), m.mdsc);
    }
}

fn read_image(path: &Path) -> Result<image::GrayImage> {
    data::read_gray(path).with_context(|| format!("reading image {}", path.display()))
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenPhantoms { out, count, seed, fluid_free, preset } => {
            let preset = match preset {
                PresetArg::Desk => PhantomPreset::Desk,
                PresetArg::Table1Faithful => PhantomPreset::Table1Faithful,
            };
            let ds = data::export_phantoms(&out, preset, count, seed, fluid_free)?;
            let f = data::class_stats(&ds)?;
            println!("wrote {count} phantoms to {} (bg {:.4}, irf {:.4}, srf {:.4}, ped {:.4})", out.display(), f[0], f[1], f[2], f[3]);
        }
        Cmd::PretrainPrior { data, out, config } => {
            let run = load_config(config.as_deref())?;
            let ds = load_data(&data)?;
            let (bundle, report) = pretrain_prior(&ds, &run)?;
            prior_checkpoint(&run, &bundle, &report)?.save(&out)?;
            println!(
                "best epoch {}: validation MSE {:.6} (mean-image baseline {:.6}); saved {}",
                report.best_epoch,
                report.best_val_mse,
                report.baseline_mse,
                out.display()
            );
        }
        Cmd::Train { data, prior, out, config } => {
            let run = load_config(config.as_deref())?;
            let ds = load_data(&data)?;
            let mut prior_bundle = match &prior {
                Some(p) => Some(load_prior(&Checkpoint::load(p)?).with_context(|| format!("loading prior {}", p.display()))?.1),
                None => None,
            };
            if run.model.needs_vae() && prior_bundle.is_none() {
                bail!("this configuration feeds VAE reconstructions to the prior; pass --prior");
            }
            let prepared = Prepared::new(&ds, (run.model.input_size[0], run.model.input_size[1]))?;
            let plan = split(prepared.len(), run.train.split_ratio, run.train.seed)?;
            let trained = train_segmentation(&prepared, &plan, &run, prior_bundle.as_mut())?;
            segmentation_checkpoint(&run, &trained, prior_bundle.as_ref())?.save(&out)?;
            let csv_path = if run.train.checkpoint_dir.is_empty() {
                out.with_extension("csv")
            } else {
                let dir = PathBuf::from(&run.train.checkpoint_dir);
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                dir.join("metrics.csv")
            };
            std::fs::write(&csv_path, &trained.report.csv).with_context(|| format!("writing {}", csv_path.display()))?;
            println!(
                "best epoch {} with mDSC {:.4}; loss {:.4} -> {:.4}; saved {} and {}",
                trained.report.best_epoch,
                trained.report.best_mdsc,
                trained.report.initial_loss,
                trained.report.epoch_loss.last().copied().unwrap_or(f64::NAN),
                out.display(),
                csv_path.display()
            );
            print_report("test", &trained.report.final_test);
        }
        Cmd::Eval { data, model, split: which } => {
            let mut loaded = LoadedModel::from_checkpoint(&Checkpoint::load(&model)?)?;
            let ds = load_data(&data)?;
            let size = loaded.run.model.input_size;
            let prepared = Prepared::new(&ds, (size[0], size[1]))?;
            let plan = split(prepared.len(), loaded.run.train.split_ratio, loaded.run.train.seed)?;
            let (label, ids) = match which {
                SplitArg::Train => ("train", plan.train_ids),
                SplitArg::Test => ("test", plan.test_ids),
                SplitArg::All => ("all", (0..prepared.len()).collect()),
            };
            let r = loaded.evaluate(&prepared, &ids)?;
            print_report(label, &r);
        }
        Cmd::Infer { model, image, out } => {
            let mut loaded = LoadedModel::from_checkpoint(&Checkpoint::load(&model)?)?;
            let img = read_image(&image)?;
            let size = loaded.run.model.input_size;
            let x = data::preprocess_image(&img, (size[0], size[1]))?;
            let mask = loaded.predict(&x)?;
            let small = image::GrayImage::from_raw(size[1] as u32, size[0] as u32, mask.item(0).to_vec()).context("mask buffer")?;
            let full = data::resize_nearest(&small, (img.height() as usize, img.width() as usize));
            data::write_gray(&out, &full)?;
            let mut counts = [0usize; 4];
            for &v in full.as_raw() {
                counts[(v as usize).min(3)] += 1;
            }
            println!("wrote {} (pixel counts bg {}, irf {}, srf {}, ped {})", out.display(), counts[0], counts[1], counts[2], counts[3]);
        }
        Cmd::Ablate { axis, values, seeds, config, out, data, prior_data, count, prior_count } => {
            let run = match &config {
                Some(p) => load_config(Some(p))?,
                None => RunConfig::desk(),
            };
            let axis: AblationAxis = axis.parse()?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            let base_seed = seeds[0];
            let labeled = match &data {
                Some(d) => load_data(d)?,
                None => data::phantom_corpus(PhantomPreset::Desk, count, base_seed, false)?,
            };
            let free = match &prior_data {
                Some(d) => load_data(d)?,
                None => data::phantom_corpus(PhantomPreset::Desk, prior_count, base_seed.wrapping_add(1_000_003), true)?,
            };
            let table = run_ablation(&run, axis, &values, &seeds, &labeled, &free)?;
            let csv = table.to_csv();
            std::fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
            print!("{csv}");
        }
        Cmd::Heatmaps { model, image, mask, out } => {
            let mut loaded = LoadedModel::from_checkpoint(&Checkpoint::load(&model)?)?;
            let img = read_image(&image)?;
            let size = loaded.run.model.input_size;
            let target = (size[0], size[1]);
            let x = data::preprocess_image(&img, target)?;
            let gt = match &mask {
                Some(m) => {
                    let s = LabeledSlice::new("heatmap", img.clone(), read_image(m)?, data::DeviceTag::Phantom)?;
                    target_labels(loaded.run.model.head, &data::preprocess(&s, target)?.1)?
                }
                None => {
                    log::warn!("no --mask given; writing the predicted mask as gt.pgm");
                    loaded.predict(&x)?
                }
            };
            let prior = loaded.prior_input(&x)?;
            let files = export_heatmaps(&loaded.model, &mut loaded.store, &x, prior.as_ref(), &gt, &out)?;
            for f in files {
                let g = data::read_gray(&f)?;
                println!("{} {}x{}", f.display(), g.height(), g.width());
            }
        }
        Cmd::PrintConfig { preset } => {
            for (k, v) in RunConfig::documented_keys(preset.into())? {
                println!("{k} = {v}");
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = runtime::thread_cap()? {
        log::debug!("{} = {n}", runtime::THREADS_ENV);
    }
    let matches = Cli::command().after_long_help(config_help()).get_matches();
    let cli = Cli::from_arg_matches(&matches)?;
    run(cli.cmd)
}
