//! SGD with momentum and Adam, both with L2 weight decay folded into the
//! gradient.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::ParamStore;
use crate::error::{DpaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = DpaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(DpaError::config(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            ))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// SGD only.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Adam only.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DpaError::config("optim.momentum must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(DpaError::config("optim.beta1 and optim.beta2 must lie in [0, 1)"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(DpaError::config("optim.weight_decay must be ≥ 0 and optim.eps > 0"));
        }
        Ok(())
    }
}

/// Per-parameter optimizer state, laid out like the store's parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let second = match cfg.kind {
            OptimizerKind::Adam => zeros.clone(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer {
            cfg,
            first: zeros,
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.steps += 1;
        let c = &self.cfg;
        let (bc1, bc2) = (
            1.0 - c.beta1.powi(self.steps as i32),
            1.0 - c.beta2.powi(self.steps as i32),
        );
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let grad = p.grad.data().to_vec();
            let value = p.value.data_mut();
            let m = &mut self.first[i];
            match c.kind {
                OptimizerKind::Sgd => {
                    for j in 0..value.len() {
                        let g = grad[j] + c.weight_decay * value[j];
                        m[j] = c.momentum * m[j] + g;
                        value[j] -= lr * m[j];
                    }
                }
                OptimizerKind::Adam => {
                    let v = &mut self.second[i];
                    for j in 0..value.len() {
                        let g = grad[j] + c.weight_decay * value[j];
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        value[j] -= lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
            }
        }
        store.zero_grad();
    }
}
