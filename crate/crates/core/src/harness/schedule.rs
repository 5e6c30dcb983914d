//! Learning-rate schedule: linear warmup followed by cosine or step decay.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{DpaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decay {
    #[default]
    Cosine,
    /// Multiply by `gamma` at every milestone epoch reached.
    MultiStep,
}

impl FromStr for Decay {
    type Err = DpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Decay::Cosine),
            "multistep" => Ok(Decay::MultiStep),
            other => Err(DpaError::config(format!(
                "unknown decay `{other}` (expected cosine or multistep)"
            ))),
        }
    }
}

impl fmt::Display for Decay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decay::Cosine => "cosine",
            Decay::MultiStep => "multistep",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_start_factor: f64,
    pub decay: Decay,
    /// Absolute epoch indices; only read by [`Decay::MultiStep`].
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 1e-2,
            epochs: 60,
            warmup_epochs: 5,
            warmup_start_factor: 0.1,
            decay: Decay::Cosine,
            milestones: vec![30, 50],
            gamma: 0.1,
        }
    }
}

impl Schedule {
    /// Learning rate for zero-based `epoch`.
    ///
    /// Warmup ramps linearly from `warmup_start_factor·base_lr` and reaches
    /// `base_lr` at epoch `warmup_epochs`, where decay starts.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let base = self.base_lr;
        if epoch < self.warmup_epochs {
            let t = epoch as f64 / self.warmup_epochs as f64;
            return base * (self.warmup_start_factor + (1.0 - self.warmup_start_factor) * t);
        }
        match self.decay {
            Decay::Cosine => {
                let span = self.epochs.saturating_sub(self.warmup_epochs).max(1) as f64;
                let t = (epoch - self.warmup_epochs) as f64;
                base * (1.0 + (PI * t / span).cos()) / 2.0
            }
            Decay::MultiStep => {
                let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
                base * self.gamma.powi(passed as i32)
            }
        }
    }
}
