//! Run configuration with a flat `key = value` text form.
//!
//! ```text
//! # comments start with '#'
//! preset = desk          # optional, applied before the other keys
//! scan_mode = local
//! depths = 1,1
//! lr = 0.001
//! ```
//!
//! Every key is optional; unknown or duplicated keys are errors. The
//! canonical form written by [`RunConfig::to_text`] lists every key in a
//! fixed order and parses back to an equal value.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{default_windows, Preset, QMambaConfig};
use crate::scan2d::ScanMode;
use crate::tensor::Scalar;

pub const CONFIG_VERSION: u32 = 1;

/// Optimisation and patch-protocol settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Scalar,
    pub weight_decay: Scalar,
    pub patch_size: usize,
    pub patches_per_image: usize,
    /// Crops averaged per image at evaluation.
    pub eval_patches: usize,
    /// Random flips and transposes of training crops.
    pub augment: bool,
    pub freeze_backbone: bool,
    pub tune_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 9,
            batch_size: 4,
            lr: 3e-4,
            weight_decay: 0.05,
            patch_size: 32,
            patches_per_image: 8,
            eval_patches: 4,
            augment: true,
            freeze_backbone: false,
            tune_head: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("batch_size", self.batch_size > 0),
            ("patch_size", self.patch_size > 0),
            ("patches_per_image", self.patches_per_image > 0),
            ("eval_patches", self.eval_patches > 0),
            ("lr", self.lr.is_finite() && self.lr >= 0.0),
            ("weight_decay", self.weight_decay.is_finite() && self.weight_decay >= 0.0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((k, _)) => Err(Error::Config(format!("invalid value for {k}"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: QMambaConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_preset(Preset::Desk, ScanMode::Local)
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|t| parse_one(key, t.trim())).collect()
}

const KEYS: &[&str] = &[
    "preset",
    "scan_mode",
    "depths",
    "embed_dims",
    "windows",
    "n_state",
    "expand",
    "mlp_ratio",
    "head_hidden",
    "patch",
    "prompts",
    "prompt_size",
    "scan_chunk",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "patch_size",
    "patches_per_image",
    "eval_patches",
    "augment",
    "freeze_backbone",
    "tune_head",
];

impl RunConfig {
    pub fn from_preset(p: Preset, mode: ScanMode) -> Self {
        Self { model: QMambaConfig::preset(p, mode), train: TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !self.train.patch_size.is_multiple_of(self.model.patch) {
            return Err(Error::Config(format!(
                "patch_size {} is not a multiple of the embedding patch {}",
                self.train.patch_size, self.model.patch
            )));
        }
        Ok(())
    }

    /// Sets one key. Changing `depths` resets `windows` to the default
    /// schedule when the stage count changes.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "preset" => {
                let mode = m.scan_mode;
                *m = QMambaConfig::preset(parse_one(key, v)?, mode);
            }
            "scan_mode" => m.scan_mode = parse_one(key, v)?,
            "depths" => {
                m.depths = parse_list(key, v)?;
                if m.windows.len() != m.depths.len() {
                    m.windows = default_windows(m.depths.len());
                }
            }
            "embed_dims" => m.embed_dims = parse_list(key, v)?,
            "windows" => m.windows = parse_list(key, v)?,
            "n_state" => m.n_state = parse_one(key, v)?,
            "expand" => m.expand = parse_one(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse_one(key, v)?,
            "head_hidden" => m.head_hidden = parse_one(key, v)?,
            "patch" => m.patch = parse_one(key, v)?,
            "prompts" => m.prompts = parse_one(key, v)?,
            "prompt_size" => m.prompt_size = parse_one(key, v)?,
            "scan_chunk" => m.scan_chunk = parse_one(key, v)?,
            "seed" => t.seed = parse_one(key, v)?,
            "epochs" => t.epochs = parse_one(key, v)?,
            "batch_size" => t.batch_size = parse_one(key, v)?,
            "lr" => t.lr = parse_one(key, v)?,
            "weight_decay" => t.weight_decay = parse_one(key, v)?,
            "patch_size" => t.patch_size = parse_one(key, v)?,
            "patches_per_image" => t.patches_per_image = parse_one(key, v)?,
            "eval_patches" => t.eval_patches = parse_one(key, v)?,
            "augment" => t.augment = parse_one(key, v)?,
            "freeze_backbone" => t.freeze_backbone = parse_one(key, v)?,
            "tune_head" => t.tune_head = parse_one(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses the text form on top of `self` (a preset line, if any, is
    /// applied first).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        for k in KEYS {
            if let Some(v) = entries.get(*k) {
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Architecture keys only; two runs can share a checkpoint exactly when
    /// these agree.
    pub fn model_text(&self) -> String {
        let m = &self.model;
        format!(
            "scan_mode = {}\ndepths = {}\nembed_dims = {}\nwindows = {}\nn_state = {}\nexpand = {}\n\
             mlp_ratio = {}\nhead_hidden = {}\npatch = {}\nprompts = {}\nprompt_size = {}\nscan_chunk = {}\n",
            m.scan_mode,
            list(&m.depths),
            list(&m.embed_dims),
            list(&m.windows),
            m.n_state,
            m.expand,
            m.mlp_ratio,
            m.head_hidden,
            m.patch,
            m.prompts,
            m.prompt_size,
            m.scan_chunk,
        )
    }

    /// Canonical text: every key, fixed order, shortest round-trip floats.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        format!(
            "{}seed = {}\nepochs = {}\nbatch_size = {}\nlr = {:?}\nweight_decay = {:?}\npatch_size = {}\n\
             patches_per_image = {}\neval_patches = {}\naugment = {}\nfreeze_backbone = {}\ntune_head = {}\n",
            self.model_text(),
            t.seed,
            t.epochs,
            t.batch_size,
            t.lr,
            t.weight_decay,
            t.patch_size,
            t.patches_per_image,
            t.eval_patches,
            t.augment,
            t.freeze_backbone,
            t.tune_head,
        )
    }

    /// Model section parsed from text, starting from defaults.
    pub fn model_from_text(text: &str) -> Result<QMambaConfig> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.model.validate()?;
        Ok(c.model)
    }
}
