//! Flat TOML run configuration covering the model, segmentation training and
//! prior pretraining.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ClassMode, LossWeights};
use crate::net::ModelConfig;
use crate::priornet::VaeConfig;

/// Data used for per-epoch model selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Select on the held-out test split, as the reference protocol does.
    #[default]
    Test,
    /// Carve a validation split out of the training split and select on it;
    /// the test split is only evaluated once at the end.
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    /// Decoupled weight decay rate.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub w_dice: f64,
    pub w_lovasz: f64,
    pub dice_eps: f64,
    pub lovasz_classes: ClassMode,
    /// Fraction of the dataset used for training.
    pub split_ratio: f64,
    pub eval_split: EvalSplit,
    /// Fraction of the training split held out for selection when `eval_split = "val"`.
    pub val_ratio: f64,
    /// Directory for the metrics CSV; empty means next to the output checkpoint.
    pub checkpoint_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps_opt: 1e-8,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 150,
            seed: 0,
            w_dice: 1.0,
            w_lovasz: 1.0,
            dice_eps: 1.0,
            lovasz_classes: ClassMode::All,
            split_ratio: 0.8,
            eval_split: EvalSplit::Test,
            val_ratio: 0.1,
            checkpoint_dir: String::new(),
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { dice: self.w_dice, lovasz: self.w_lovasz, dice_eps: self.dice_eps, class_mode: self.lovasz_classes }
    }

    fn problems(&self, out: &mut Vec<String>) {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps_opt > 0.0) {
            out.push(format!("eps_opt must be positive, got {}", self.eps_opt));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            out.push(format!("split_ratio must be in (0, 1), got {}", self.split_ratio));
        }
        if !(self.val_ratio > 0.0 && self.val_ratio < 1.0) {
            out.push(format!("val_ratio must be in (0, 1), got {}", self.val_ratio));
        }
    }
}

/// Settings of the VAE prior and its pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub vae_width: usize,
    pub vae_latent_dim: usize,
    /// Weight of the KL term against the per-pixel reconstruction MSE.
    pub vae_beta: f64,
    pub vae_epochs: usize,
    pub vae_lr: f64,
    pub vae_batch_size: usize,
    /// Fraction of the fluid-free corpus held out for checkpoint selection.
    pub vae_val_ratio: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { vae_width: 16, vae_latent_dim: 128, vae_beta: 1e-4, vae_epochs: 40, vae_lr: 1e-3, vae_batch_size: 8, vae_val_ratio: 0.2 }
    }
}

impl PriorConfig {
    fn problems(&self, out: &mut Vec<String>) {
        if !(self.vae_beta >= 0.0) {
            out.push(format!("vae_beta must be non-negative, got {}", self.vae_beta));
        }
        if !(self.vae_lr > 0.0) {
            out.push(format!("vae_lr must be positive, got {}", self.vae_lr));
        }
        if self.vae_batch_size == 0 {
            out.push("vae_batch_size must be positive".into());
        }
        if !(self.vae_val_ratio > 0.0 && self.vae_val_ratio < 1.0) {
            out.push(format!("vae_val_ratio must be in (0, 1), got {}", self.vae_val_ratio));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 256-pixel input, `base_c = 64`, batch 16, 150 epochs.
    #[default]
    Full,
    /// 64-pixel input, `base_c = 8`, batch 4, 30 epochs.
    Desk,
}

/// Everything one run needs. Serialized as a single flat key table.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prior: PriorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Full)
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table> {
    match toml::Value::try_from(v) {
        Ok(toml::Value::Table(t)) => Ok(t),
        Ok(other) => Err(Error::config(format!("expected a key table, got {}", other.type_str()))),
        Err(e) => Err(Error::config(e.to_string())),
    }
}

fn from_table<T: DeserializeOwned>(t: &toml::Table) -> Result<T> {
    toml::Value::Table(t.clone()).try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => RunConfig { model: ModelConfig::default(), train: TrainConfig::default(), prior: PriorConfig::default() },
            Preset::Desk => RunConfig {
                model: ModelConfig::desk(),
                train: TrainConfig { lr: 2e-3, batch_size: 4, epochs: 30, ..TrainConfig::default() },
                prior: PriorConfig::default(),
            },
        }
    }

    pub fn desk() -> Self {
        RunConfig::preset(Preset::Desk)
    }

    pub fn vae(&self) -> VaeConfig {
        VaeConfig {
            in_c: crate::net::INPUT_CHANNELS,
            width: self.prior.vae_width,
            latent_dim: self.prior.vae_latent_dim,
            input_size: (self.model.input_size[0], self.model.input_size[1]),
        }
    }

    /// Every recognized key with its default under `preset`, grouped as model,
    /// training and prior keys.
    pub fn documented_keys(preset: Preset) -> Result<Vec<(String, String)>> {
        let cfg = RunConfig::preset(preset);
        let mut out = vec![("preset".to_string(), format!("{:?}", format!("{preset:?}").to_lowercase()))];
        for t in [to_table(&cfg.model)?, to_table(&cfg.train)?, to_table(&cfg.prior)?] {
            out.extend(t.into_iter().map(|(k, v)| (k, v.to_string())));
        }
        Ok(out)
    }

    /// Parses a flat key table. An optional `preset` key picks the defaults
    /// the remaining keys override; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let preset = match table.remove("preset") {
            Some(v) => from_table::<PresetKey>(&toml::Table::from_iter([("preset".to_string(), v)]))?.preset,
            None => Preset::Full,
        };
        let base = RunConfig::preset(preset);
        let mut merged = [to_table(&base.model)?, to_table(&base.train)?, to_table(&base.prior)?];
        let mut unknown = Vec::new();
        for (k, v) in table {
            match merged.iter_mut().find(|t| t.contains_key(&k)) {
                Some(t) => {
                    t.insert(k, v);
                }
                None => unknown.push(k),
            }
        }
        if !unknown.is_empty() {
            unknown.sort();
            return Err(Error::config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg = RunConfig { model: from_table(&merged[0])?, train: from_table(&merged[1])?, prior: from_table(&merged[2])? };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text)
    }

    /// Flat key table holding every field, suitable for [`RunConfig::from_toml_str`].
    pub fn to_toml_string(&self) -> Result<String> {
        let mut all = to_table(&self.model)?;
        all.extend(to_table(&self.train)?);
        all.extend(to_table(&self.prior)?);
        toml::to_string(&all).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.model.validate() {
            problems.push(e.to_string());
        }
        self.train.problems(&mut problems);
        self.prior.problems(&mut problems);
        if self.model.needs_vae() {
            if let Err(e) = self.vae().validate() {
                problems.push(e.to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

#[derive(Deserialize)]
struct PresetKey {
    preset: Preset,
}
