//! Global pooling operators: average, minimum, generalized-mean and soft
//! pooling.
//!
//! Every operator reduces a set of *regions* of an `N×C×H×W` map. With
//! [`PoolAxis::Spatial`] a region is one channel plane (`H·W` elements) and
//! the result is `N×C×1×1`; with [`PoolAxis::Channel`] a region is the
//! channel vector at one location (`C` elements, read with stride `H·W`) and
//! the result is `N×HW×1×1`, one descriptor per flattened location.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{DpaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolAxis {
    Spatial,
    Channel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GemParams {
    pub alpha: f64,
    pub clamp_floor: f64,
}

impl GemParams {
    pub const DEFAULT_ALPHA: f64 = 3.0;
    pub const DEFAULT_FLOOR: f64 = 1e-6;

    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha <= 0.0 {
            return Err(DpaError::InvalidAlpha(alpha));
        }
        Ok(GemParams {
            alpha,
            clamp_floor: Self::DEFAULT_FLOOR,
        })
    }
}

impl Default for GemParams {
    fn default() -> Self {
        GemParams {
            alpha: Self::DEFAULT_ALPHA,
            clamp_floor: Self::DEFAULT_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SoftMode {
    /// Softmax-weighted mean, one value per region.
    Scalar,
    /// The unsummed field `e^x·x / Σe^x`, same shape as the input; its
    /// region sums equal the `Scalar` result.
    RetainedMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolKind {
    Avg,
    Min,
    Gem(GemParams),
    Soft(SoftMode),
}

impl PoolKind {
    pub fn name(&self) -> &'static str {
        match self {
            PoolKind::Avg => "avg_pool",
            PoolKind::Min => "min_pool",
            PoolKind::Gem(_) => "gem_pool",
            PoolKind::Soft(_) => "soft_pool",
        }
    }
}

thread_local! {
    static CORRUPT_GEM_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Test fixture: perturbs the GeM gradient on the current thread so that
/// gradient checks can be shown to catch a broken backward rule.
#[doc(hidden)]
pub fn corrupt_gem_backward(enabled: bool) {
    CORRUPT_GEM_BACKWARD.with(|c| c.set(enabled));
}

#[derive(Debug, Clone, Copy)]
struct Regions {
    count: usize,
    len: usize,
    stride: usize,
    axis: PoolAxis,
    channels: usize,
    plane: usize,
}

impl Regions {
    fn of(x: &Tensor, axis: PoolAxis) -> Result<Self> {
        if x.rank() != 4 {
            return Err(DpaError::shape(format!(
                "pooling expects N×C×H×W, got {:?}",
                x.shape()
            )));
        }
        let [n, c, h, w] = x.dims4();
        let plane = h * w;
        Ok(match axis {
            PoolAxis::Spatial => Regions {
                count: n * c,
                len: plane,
                stride: 1,
                axis,
                channels: c,
                plane,
            },
            PoolAxis::Channel => Regions {
                count: n * plane,
                len: c,
                stride: plane,
                axis,
                channels: c,
                plane,
            },
        })
    }

    fn start(&self, r: usize) -> usize {
        match self.axis {
            PoolAxis::Spatial => r * self.plane,
            PoolAxis::Channel => (r / self.plane) * self.channels * self.plane + r % self.plane,
        }
    }

    fn indices(&self, r: usize) -> impl Iterator<Item = usize> {
        let (start, stride) = (self.start(r), self.stride);
        (0..self.len).map(move |i| start + i * stride)
    }

    fn descriptor_shape(&self, x: &Tensor) -> Vec<usize> {
        let n = x.shape()[0];
        vec![n, self.count / n, 1, 1]
    }
}

/// Softmax weights of one region, stabilized by subtracting the region max.
fn soft_weights(d: &[f64], idx: &[usize]) -> Vec<f64> {
    let max = idx.iter().map(|&i| d[i]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = idx.iter().map(|&i| (d[i] - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

struct Forward {
    out: Tensor,
    /// Min pooling: flat input index of the selected element per region.
    arg: Vec<usize>,
}

fn forward(x: &Tensor, kind: PoolKind, axis: PoolAxis) -> Result<Forward> {
    let regions = Regions::of(x, axis)?;
    let d = x.data();
    let mut arg = Vec::new();
    let out = match kind {
        PoolKind::Avg => {
            let data = (0..regions.count)
                .map(|r| regions.indices(r).map(|i| d[i]).sum::<f64>() / regions.len as f64)
                .collect();
            Tensor::from_parts(regions.descriptor_shape(x), data)
        }
        PoolKind::Min => {
            // -max(-x), first maximizer of -x in region order
            let mut data = Vec::with_capacity(regions.count);
            for r in 0..regions.count {
                let mut best = regions.start(r);
                for i in regions.indices(r).skip(1) {
                    if -d[i] > -d[best] {
                        best = i;
                    }
                }
                arg.push(best);
                data.push(-(-d[best]));
            }
            Tensor::from_parts(regions.descriptor_shape(x), data)
        }
        PoolKind::Gem(p) => {
            if !p.alpha.is_finite() || p.alpha <= 0.0 {
                return Err(DpaError::InvalidAlpha(p.alpha));
            }
            let mut data = Vec::with_capacity(regions.count);
            for r in 0..regions.count {
                let clamped: Vec<f64> = regions.indices(r).map(|i| d[i].max(p.clamp_floor)).collect();
                // Scaling by the region max keeps constant regions exact and
                // large exponents finite.
                let m = clamped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = clamped.iter().map(|v| (v / m).powf(p.alpha)).sum();
                data.push(m * (s / regions.len as f64).powf(1.0 / p.alpha));
            }
            Tensor::from_parts(regions.descriptor_shape(x), data)
        }
        PoolKind::Soft(SoftMode::Scalar) => {
            let mut data = Vec::with_capacity(regions.count);
            for r in 0..regions.count {
                let idx: Vec<usize> = regions.indices(r).collect();
                let w = soft_weights(d, &idx);
                data.push(idx.iter().zip(&w).map(|(&i, w)| w * d[i]).sum());
            }
            Tensor::from_parts(regions.descriptor_shape(x), data)
        }
        PoolKind::Soft(SoftMode::RetainedMap) => {
            let mut data = vec![0.0; d.len()];
            for r in 0..regions.count {
                let idx: Vec<usize> = regions.indices(r).collect();
                let w = soft_weights(d, &idx);
                for (&i, w) in idx.iter().zip(&w) {
                    data[i] = w * d[i];
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
    };
    Ok(Forward { out, arg })
}

struct PoolBack {
    kind: PoolKind,
    axis: PoolAxis,
    arg: Vec<usize>,
}

impl Backward for PoolBack {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let regions = Regions::of(x, self.axis)?;
        let (d, g, y) = (x.data(), grad.data(), out.data());
        let mut gx = vec![0.0; d.len()];
        match self.kind {
            PoolKind::Avg => {
                for (r, &gr) in g.iter().enumerate().take(regions.count) {
                    let share = gr / regions.len as f64;
                    for i in regions.indices(r) {
                        gx[i] = share;
                    }
                }
            }
            PoolKind::Min => {
                for (r, &i) in self.arg.iter().enumerate() {
                    gx[i] = g[r];
                }
            }
            PoolKind::Gem(p) => {
                let corrupt = CORRUPT_GEM_BACKWARD.with(|c| c.get());
                for r in 0..regions.count {
                    for i in regions.indices(r) {
                        if d[i] >= p.clamp_floor {
                            gx[i] = g[r] * (d[i] / y[r]).powf(p.alpha - 1.0) / regions.len as f64;
                            if corrupt {
                                gx[i] *= 1.05;
                            }
                        }
                    }
                }
            }
            PoolKind::Soft(SoftMode::Scalar) => {
                for r in 0..regions.count {
                    let idx: Vec<usize> = regions.indices(r).collect();
                    let w = soft_weights(d, &idx);
                    for (&i, w) in idx.iter().zip(&w) {
                        gx[i] = g[r] * w * (1.0 + d[i] - y[r]);
                    }
                }
            }
            PoolKind::Soft(SoftMode::RetainedMap) => {
                for r in 0..regions.count {
                    let idx: Vec<usize> = regions.indices(r).collect();
                    let w = soft_weights(d, &idx);
                    let weighted: f64 = idx.iter().zip(&w).map(|(&i, w)| g[i] * w * d[i]).sum();
                    for (&i, w) in idx.iter().zip(&w) {
                        gx[i] = w * (g[i] * (1.0 + d[i]) - weighted);
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))])
    }
}

/// Pools `x` without recording.
pub fn pool(x: &Tensor, kind: PoolKind, axis: PoolAxis) -> Result<Tensor> {
    Ok(forward(x, kind, axis)?.out)
}

impl Tape {
    pub fn pool(&self, x: Var, kind: PoolKind, axis: PoolAxis) -> Result<Var> {
        let Forward { out, arg } = forward(&self.value(x), kind, axis)?;
        self.record(PoolBack { kind, axis, arg }, &[x], out)
    }

    pub fn avg_pool(&self, x: Var, axis: PoolAxis) -> Result<Var> {
        self.pool(x, PoolKind::Avg, axis)
    }

    pub fn min_pool(&self, x: Var, axis: PoolAxis) -> Result<Var> {
        self.pool(x, PoolKind::Min, axis)
    }

    pub fn gem_pool(&self, x: Var, axis: PoolAxis, params: GemParams) -> Result<Var> {
        self.pool(x, PoolKind::Gem(params), axis)
    }

    pub fn soft_pool(&self, x: Var, axis: PoolAxis, mode: SoftMode) -> Result<Var> {
        self.pool(x, PoolKind::Soft(mode), axis)
    }
}
