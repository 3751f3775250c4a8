//! Ablation harness: trains config variants along one axis under identical
//! seeds and data and tabulates the results.

use std::fmt::Write as _;

use crate::blocks::ConvKind;
use crate::data::{split, LabeledSlice, Prepared};
use crate::error::{Error, Result};
use crate::gate::GateVariant;
use crate::losses::MetricsRecord;
use crate::priornet::PriorSource;
use crate::runtime::config::RunConfig;
use crate::runtime::train::{metric_classes, pretrain_prior, train_segmentation, PriorBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// `on` keeps the configured gate variant; `off` drops the prior branch.
    Prior,
    /// `on` keeps the gates; `off` uses plain concatenation skips.
    Attention,
    GateVariant,
    Ratio,
    Aspp,
    ConvKind,
    NormnetSource,
    NormnetMidc,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 8] = [
        AblationAxis::Prior,
        AblationAxis::Attention,
        AblationAxis::GateVariant,
        AblationAxis::Ratio,
        AblationAxis::Aspp,
        AblationAxis::ConvKind,
        AblationAxis::NormnetSource,
        AblationAxis::NormnetMidc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Prior => "prior",
            AblationAxis::Attention => "attention",
            AblationAxis::GateVariant => "gate_variant",
            AblationAxis::Ratio => "ratio",
            AblationAxis::Aspp => "aspp",
            AblationAxis::ConvKind => "conv_kind",
            AblationAxis::NormnetSource => "normnet_source",
            AblationAxis::NormnetMidc => "normnet_midc",
        }
    }

    /// Values enumerated when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: Vec<&str> = match self {
            AblationAxis::Prior | AblationAxis::Attention | AblationAxis::Aspp => vec!["on", "off"],
            AblationAxis::GateVariant => GateVariant::ALL.iter().map(|g| g.name()).collect(),
            AblationAxis::Ratio => vec!["1", "2", "3", "4", "5"],
            AblationAxis::ConvKind => vec!["depthwise_separable", "standard"],
            AblationAxis::NormnetSource => PriorSource::ALL.iter().map(|p| p.name()).collect(),
            AblationAxis::NormnetMidc => vec!["8", "16", "32"],
        };
        v.into_iter().map(String::from).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut run = base.clone();
        let m = &mut run.model;
        let on_off = |v: &str| match v {
            "on" | "true" => Ok(true),
            "off" | "false" => Ok(false),
            other => Err(Error::config(format!("expected on or off, got {other:?}"))),
        };
        let number = |v: &str| v.parse::<usize>().map_err(|_| Error::config(format!("expected a positive integer, got {v:?}")));
        match self {
            AblationAxis::Prior => {
                if !on_off(value)? {
                    m.gate_variant = GateVariant::DualNoPrior;
                }
            }
            AblationAxis::Attention => m.gate_enabled = on_off(value)?,
            AblationAxis::GateVariant => m.gate_variant = value.parse()?,
            AblationAxis::Ratio => m.ratio = number(value)?,
            AblationAxis::Aspp => m.aspp_enabled = on_off(value)?,
            AblationAxis::ConvKind => {
                m.conv_kind = match value {
                    "depthwise_separable" => ConvKind::DepthwiseSeparable,
                    "standard" => ConvKind::Standard,
                    other => return Err(Error::config(format!("unknown conv kind {other:?}"))),
                }
            }
            AblationAxis::NormnetSource => m.prior_source = value.parse()?,
            AblationAxis::NormnetMidc => m.midc = number(value)?,
        }
        run.validate()?;
        Ok(run)
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis {s:?}; expected one of {}", AblationAxis::ALL.map(|a| a.name()).join(", "))))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// `None` marks the seed-mean row.
    pub seed: Option<u64>,
    pub metrics: MetricsRecord,
    pub params: usize,
    /// Mean step time relative to the first variant under the same seed.
    pub rel_step_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub num_classes: usize,
    pub rows: Vec<AblationRow>,
    /// Variants that were skipped, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let header = MetricsRecord::csv_header(self.num_classes);
        let dsc_cols: Vec<&str> = header.split(',').skip(2).collect();
        let mut out = format!("variant,seed,{},params,rel_step_time\n", dsc_cols.join(","));
        for r in &self.rows {
            let seed = r.seed.map_or("mean".to_string(), |s| s.to_string());
            let dsc: Vec<String> = r.metrics.per_class_dsc.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}={},{seed},{},{:.6},{},{:.4}", self.axis.name(), r.variant, dsc.join(","), r.metrics.mdsc, r.params, r.rel_step_time);
        }
        for (v, why) in &self.skipped {
            let _ = writeln!(out, "# skipped {}={v}: {why}", self.axis.name());
        }
        out
    }

    /// Seed-mean row of `variant`.
    pub fn mean_row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed.is_none())
    }
}

/// Trains every valid `(value, seed)` pair on the same data and split. The
/// prior is pretrained once per seed on `fluid_free` when any variant needs it.
pub fn run_ablation(base: &RunConfig, axis: AblationAxis, values: &[String], seeds: &[u64], data: &[LabeledSlice], fluid_free: &[LabeledSlice]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut variants = Vec::new();
    let mut skipped = Vec::new();
    for v in values {
        match axis.apply(base, v) {
            Ok(run) => variants.push((v.clone(), run)),
            Err(e) => {
                log::warn!("skipping {}={v}: {e}", axis.name());
                skipped.push((v.clone(), e.to_string()));
            }
        }
    }
    if variants.is_empty() {
        return Err(Error::config(format!("no valid values for axis {}", axis.name())));
    }
    let prepared = Prepared::new(data, (base.model.input_size[0], base.model.input_size[1]))?;
    let num_classes = metric_classes(base);
    let mut per_variant: Vec<Vec<AblationRow>> = vec![Vec::new(); variants.len()];
    for &seed in seeds {
        let plan = split(prepared.len(), base.train.split_ratio, seed)?;
        let mut prior: Option<PriorBundle> = None;
        if variants.iter().any(|(_, r)| r.model.needs_vae()) {
            let mut prior_run = base.clone();
            prior_run.train.seed = seed;
            prior = Some(pretrain_prior(fluid_free, &prior_run)?.0);
        }
        let mut reference_time = None;
        for (k, (name, run)) in variants.iter().enumerate() {
            let mut run = run.clone();
            run.train.seed = seed;
            let mut p = prior.clone();
            let trained = train_segmentation(&prepared, &plan, &run, p.as_mut())?;
            let t = trained.report.step_seconds;
            let reference = *reference_time.get_or_insert(t);
            log::info!("{}={name} seed {seed}: test mdsc {:.4}", axis.name(), trained.report.final_test.slice_macro.mdsc);
            per_variant[k].push(AblationRow {
                variant: name.clone(),
                seed: Some(seed),
                metrics: trained.report.final_test.slice_macro.clone(),
                params: run.model.param_count(),
                rel_step_time: if reference > 0.0 { t / reference } else { 1.0 },
            });
        }
    }
    let mut rows = Vec::new();
    for seeded in per_variant {
        let n = seeded.len() as f64;
        let per_class = (0..seeded[0].metrics.per_class_dsc.len()).map(|c| seeded.iter().map(|r| r.metrics.per_class_dsc[c]).sum::<f64>() / n).collect();
        let mean = AblationRow {
            variant: seeded[0].variant.clone(),
            seed: None,
            metrics: MetricsRecord::from_per_class(per_class),
            params: seeded[0].params,
            rel_step_time: seeded.iter().map(|r| r.rel_step_time).sum::<f64>() / n,
        };
        rows.extend(seeded);
        rows.push(mean);
    }
    Ok(AblationTable { axis, num_classes, rows, skipped })
}
