//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{parse_bool, parse_num, ModelConfig, Variant};
use crate::optim::{OptimizerKind, Schedule, ScheduleKind};
use crate::train::TrainConfig;

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Model configuration plus the training run around it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub out: PathBuf,
    /// Directory of cached samples; synthesized from `seed` when `None`.
    pub corpus: Option<PathBuf>,
    pub samples: usize,
    /// Trailing samples kept out of training and used for the final report;
    /// 0 reports on the training samples.
    pub holdout: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub lr: f64,
    pub min_lr: f64,
    pub augment: bool,
}

/// Training keys with their meaning. Model keys are documented on
/// [`ModelConfig`].
pub const RUN_KEYS: &[(&str, &str)] = &[
    ("seed", "seed for corpus synthesis, initialization, batching and augmentation"),
    ("out", "output directory"),
    ("corpus", "directory of cached samples, empty to synthesize"),
    ("samples", "synthetic corpus size"),
    ("holdout", "trailing samples held out for the final report, 0 to report on training data"),
    ("steps", "optimizer steps"),
    ("batch_size", "samples per step"),
    ("optimizer", "sgd or adam"),
    ("momentum", "SGD momentum"),
    ("weight_decay", "L2 penalty added to the gradient"),
    ("schedule", "constant, cosine or poly"),
    ("lr", "initial learning rate"),
    ("min_lr", "final learning rate of the cosine schedule"),
    ("augment", "random augmentation of training batches"),
];

impl Default for RunConfig {
    /// The desk overfit recipe on the full model.
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(Variant::Full),
            seed: 0,
            out: PathBuf::from("runs/desk"),
            corpus: None,
            samples: 16,
            holdout: 0,
            steps: 500,
            batch_size: 16,
            optimizer: "sgd".into(),
            momentum: 0.0,
            weight_decay: 1e-4,
            schedule: ScheduleKind::Cosine,
            lr: 0.05,
            min_lr: 4e-4,
            augment: false,
        }
    }
}

impl RunConfig {
    pub fn optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.optimizer.as_str() {
            "sgd" => Ok(OptimizerKind::sgd(self.momentum)),
            "adam" => Ok(OptimizerKind::adam()),
            o => Err(Error::Config(format!("`optimizer`: unknown optimizer `{o}` (sgd|adam)"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            optimizer: self.optimizer_kind()?,
            weight_decay: self.weight_decay,
            schedule: Schedule {
                kind: self.schedule,
                base_lr: self.lr,
                min_lr: self.min_lr,
                total: self.steps,
            },
            augment: self.augment,
            seed: self.seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer_kind()?;
        if self.samples == 0 || self.batch_size == 0 {
            return Err(Error::Config("`samples` and `batch_size` must be at least 1".into()));
        }
        if self.holdout >= self.samples {
            return Err(Error::Config(format!(
                "`holdout` {} leaves no training samples out of {}",
                self.holdout, self.samples
            )));
        }
        if !(self.lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::Config(format!(
                "`lr` {} and `min_lr` {} must satisfy 0 <= min_lr <= lr",
                self.lr, self.min_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("`momentum` must lie in [0, 1) and `weight_decay` be >= 0".into()));
        }
        Ok(())
    }

    /// Apply one key, model keys included.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "corpus" => self.corpus = (!value.is_empty()).then(|| PathBuf::from(value)),
            "samples" => self.samples = parse_num(key, value)?,
            "holdout" => self.holdout = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "optimizer" => self.optimizer = value.to_string(),
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "lr" => self.lr = parse_num(key, value)?,
            "min_lr" => self.min_lr = parse_num(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            _ => {
                if !self.model.set(key, value)? {
                    return Err(Error::UnknownKey(key.to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let mut m = self.model.to_pairs();
        let path = |p: &Path| p.display().to_string();
        m.extend([
            ("seed", self.seed.to_string()),
            ("out", path(&self.out)),
            ("corpus", self.corpus.as_deref().map(path).unwrap_or_default()),
            ("samples", self.samples.to_string()),
            ("holdout", self.holdout.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("optimizer", self.optimizer.clone()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("schedule", self.schedule.to_string()),
            ("lr", self.lr.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("augment", self.augment.to_string()),
        ]);
        m
    }

    /// Canonical form: one `key=value` per line, sorted by key.
    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parse over the defaults; `scale` and `variant` apply before other keys
    /// because they reset model presets.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = Self::default();
        for first in ["scale", "variant"] {
            if let Some((_, v)) = pairs.iter().find(|(k, _)| k == first) {
                cfg.set(first, v)?;
            }
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "scale" && k != "variant") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
