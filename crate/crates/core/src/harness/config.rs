//! Line-oriented run configuration: `section.key = value`, `#` comments.

use std::collections::{BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::optim::{OptimizerConfig, OptimizerKind};
use super::schedule::{Decay, Schedule};
use crate::attention::{AttentionVariant, Fusion};
use crate::error::{DpaError, Result};
use crate::eval::Metric;
use crate::losses::{HmtParams, LossWeights, LsceParams};
use crate::model::BackboneConfig;

/// Retrieval settings used by evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub metric: Metric,
    pub cross_camera_filter: bool,
    pub batch_size: usize,
    /// Rows per query written to `ranks.csv`.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metric: Metric::Euclidean,
            cross_camera_filter: true,
            batch_size: 64,
            top_k: 10,
        }
    }
}

/// Everything one training/evaluation run needs.
///
/// `backbone.input_size` and `backbone.num_classes` are taken from the
/// dataset when a run starts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub lsce: LsceParams,
    pub hmt: HmtParams,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            lsce: LsceParams::default(),
            hmt: HmtParams::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::default(),
            p: 8,
            k: 4,
            seed: 0,
            data_dir: PathBuf::from("data/synth"),
            eval: EvalConfig::default(),
        }
    }
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const CONFIG_KEYS: &[&str] = &[
    "model.stage_channels",
    "model.blocks_per_stage",
    "model.attention",
    "model.attention_after",
    "model.num_kernels",
    "model.fusion",
    "model.attention_gem_alpha",
    "model.head_gem_alpha",
    "loss.label_smoothing",
    "loss.margin",
    "loss.normalize",
    "loss.lambda_lsce",
    "loss.lambda_hmt",
    "optim.optimizer",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "schedule.warmup_epochs",
    "schedule.warmup_start_factor",
    "schedule.decay",
    "schedule.milestones",
    "schedule.gamma",
    "train.epochs",
    "train.p",
    "train.k",
    "train.seed",
    "data.dir",
    "eval.metric",
    "eval.cross_camera",
    "eval.batch_size",
    "eval.top_k",
];

fn scalar<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse `{value}` as {}", std::any::type_name::<T>()))
}

fn list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| scalar(v.trim())).collect()
}

fn boolean(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got `{other}`")),
    }
}

fn named<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| e.to_string())
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    let v: Vec<String> = items.into_iter().map(|x| x.to_string()).collect();
    if v.is_empty() {
        "none".into()
    } else {
        v.join(",")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses config text over the defaults. Unknown and repeated keys are
    /// rejected; the result is validated.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let location = format!("line {}", i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(DpaError::parse(source_name, location, "expected `section.key = value`"));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(DpaError::parse(source_name, location, format!("duplicate key `{key}`")));
            }
            cfg.set(key, value.trim())
                .map_err(|m| DpaError::parse(source_name, location, m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let b = &mut self.backbone;
        match key {
            "model.stage_channels" => b.stage_channels = list(value)?,
            "model.blocks_per_stage" => b.blocks_per_stage = list(value)?,
            "model.attention" => b.attention = named::<AttentionVariant>(value)?,
            "model.attention_after" => b.dpa_after_stage = list(value)?.into_iter().collect::<BTreeSet<_>>(),
            "model.num_kernels" => b.dpa.num_kernels = scalar(value)?,
            "model.fusion" => b.dpa.fusion = named::<Fusion>(value)?,
            "model.attention_gem_alpha" => b.dpa.gem.alpha = scalar(value)?,
            "model.head_gem_alpha" => b.gem_alpha = scalar(value)?,
            "loss.label_smoothing" => self.lsce.epsilon = scalar(value)?,
            "loss.margin" => self.hmt.margin = scalar(value)?,
            "loss.normalize" => self.hmt.normalize = boolean(value)?,
            "loss.lambda_lsce" => self.weights.lambda1 = scalar(value)?,
            "loss.lambda_hmt" => self.weights.lambda2 = scalar(value)?,
            "optim.optimizer" => self.optimizer.kind = named::<OptimizerKind>(value)?,
            "optim.lr" => self.schedule.base_lr = scalar(value)?,
            "optim.momentum" => self.optimizer.momentum = scalar(value)?,
            "optim.weight_decay" => self.optimizer.weight_decay = scalar(value)?,
            "optim.beta1" => self.optimizer.beta1 = scalar(value)?,
            "optim.beta2" => self.optimizer.beta2 = scalar(value)?,
            "optim.eps" => self.optimizer.eps = scalar(value)?,
            "schedule.warmup_epochs" => self.schedule.warmup_epochs = scalar(value)?,
            "schedule.warmup_start_factor" => self.schedule.warmup_start_factor = scalar(value)?,
            "schedule.decay" => self.schedule.decay = named::<Decay>(value)?,
            "schedule.milestones" => self.schedule.milestones = list(value)?,
            "schedule.gamma" => self.schedule.gamma = scalar(value)?,
            "train.epochs" => self.schedule.epochs = scalar(value)?,
            "train.p" => self.p = scalar(value)?,
            "train.k" => self.k = scalar(value)?,
            "train.seed" => self.seed = scalar(value)?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            "eval.metric" => self.eval.metric = named::<Metric>(value)?,
            "eval.cross_camera" => self.eval.cross_camera_filter = boolean(value)?,
            "eval.batch_size" => self.eval.batch_size = scalar(value)?,
            "eval.top_k" => self.eval.top_k = scalar(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.epochs == 0 {
            return Err(DpaError::config("train.epochs must be at least 1"));
        }
        if s.warmup_epochs >= s.epochs {
            return Err(DpaError::config(format!(
                "schedule.warmup_epochs ({}) must be below train.epochs ({})",
                s.warmup_epochs, s.epochs
            )));
        }
        if !(s.base_lr > 0.0 && s.base_lr.is_finite()) {
            return Err(DpaError::config("optim.lr must be positive"));
        }
        if !(s.warmup_start_factor > 0.0 && s.warmup_start_factor <= 1.0) {
            return Err(DpaError::config("schedule.warmup_start_factor must lie in (0, 1]"));
        }
        if !(s.gamma > 0.0 && s.gamma <= 1.0) {
            return Err(DpaError::config("schedule.gamma must lie in (0, 1]"));
        }
        if s.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DpaError::config("schedule.milestones must be strictly increasing"));
        }
        if self.p < 2 || self.k < 2 {
            return Err(DpaError::config("train.p and train.k must both be at least 2"));
        }
        self.optimizer.validate()?;
        LsceParams::new(self.lsce.epsilon)?;
        if self.hmt.margin.is_nan() || self.hmt.margin < 0.0 {
            return Err(DpaError::config("loss.margin must be non-negative"));
        }
        if self.weights.lambda1 < 0.0 || self.weights.lambda2 < 0.0 {
            return Err(DpaError::config("loss weights must be non-negative"));
        }
        if self.eval.batch_size == 0 || self.eval.top_k == 0 {
            return Err(DpaError::config("eval.batch_size and eval.top_k must be positive"));
        }
        // Structural checks that do not depend on the dataset.
        let mut probe = self.backbone.clone();
        probe.num_classes = probe.num_classes.max(2);
        let f = 1 << probe.stage_channels.len().saturating_sub(1);
        probe.input_size = (f, f);
        probe.validate()
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let s = &self.schedule;
        let o = &self.optimizer;
        let mut out = String::new();
        let values: Vec<String> = vec![
            join(&b.stage_channels),
            join(&b.blocks_per_stage),
            b.attention.to_string(),
            join(&b.dpa_after_stage),
            b.dpa.num_kernels.to_string(),
            b.dpa.fusion.to_string(),
            b.dpa.gem.alpha.to_string(),
            b.gem_alpha.to_string(),
            self.lsce.epsilon.to_string(),
            self.hmt.margin.to_string(),
            self.hmt.normalize.to_string(),
            self.weights.lambda1.to_string(),
            self.weights.lambda2.to_string(),
            o.kind.to_string(),
            s.base_lr.to_string(),
            o.momentum.to_string(),
            o.weight_decay.to_string(),
            o.beta1.to_string(),
            o.beta2.to_string(),
            o.eps.to_string(),
            s.warmup_epochs.to_string(),
            s.warmup_start_factor.to_string(),
            s.decay.to_string(),
            join(&s.milestones),
            s.gamma.to_string(),
            s.epochs.to_string(),
            self.p.to_string(),
            self.k.to_string(),
            self.seed.to_string(),
            self.data_dir.display().to_string(),
            self.eval.metric.to_string(),
            self.eval.cross_camera_filter.to_string(),
            self.eval.batch_size.to_string(),
            self.eval.top_k.to_string(),
        ];
        for (key, value) in CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}
