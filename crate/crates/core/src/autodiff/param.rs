use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::batchnorm::{BatchNormSpec, Mode, RunningStats};
use super::tape::{Gradients, Tape, Var};
use crate::error::{DpaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    stats: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = value.zeros_like();
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Fan-in scaled normal initialization with standard deviation `gain / sqrt(fan_in)`.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| DpaError::config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Ok(self.add(name, Tensor::new(shape, data)?))
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push((name.into(), RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0].1
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0].1
    }

    pub fn all_stats(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.stats
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Forward-pass context: the tape being recorded, the parameter store and
/// the train/eval mode.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
    track_params: bool,
    bound: HashMap<ParamId, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, store: &'a mut ParamStore, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            track_params: true,
            bound: HashMap::new(),
        }
    }

    /// Context whose parameters are recorded as constants.
    pub fn frozen(tape: &'a Tape, store: &'a mut ParamStore, mode: Mode) -> Self {
        Ctx {
            track_params: false,
            ..Ctx::new(tape, store, mode)
        }
    }

    /// Leaf variable for a parameter; repeated calls share one leaf.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self
            .tape
            .leaf(self.store.param(id).value.clone(), self.track_params);
        self.bound.insert(id, v);
        v
    }

    pub fn batchnorm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<Var> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let mode = self.mode;
        let tape = self.tape;
        tape.batchnorm2d(x, g, b, self.store.stats_mut(stats), mode, BatchNormSpec::default())
    }

    pub fn bindings(&self) -> &HashMap<ParamId, Var> {
        &self.bound
    }

    /// Adds the gradients of every bound parameter into the store.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (&id, &var) in &self.bound {
            if let Some(g) = grads.get(var) {
                self.store.param_mut(id).grad.add_assign(g);
            }
        }
    }
}
