use rand::Rng;

use super::obr::ObrBlock;
use crate::autodiff::{Conv2dSpec, Ctx, ParamId, ParamStore, Var};
use crate::error::{DpaError, Result};
use crate::pooling::{GemParams, PoolAxis, SoftMode};
use crate::Tensor;

/// Spatial-pooling attention, bound to one feature-map size.
///
/// Descriptors are pooled over channels at every location (`N×HW×1×1`):
///
/// ```text
/// b1 = conv1x1_HW(avg_c(X) + soft_c(X))
/// b2 = gem_c(X) - min_c(X)
/// S* = [b1, b2]                           N×2HW×1×1
/// X'' = sigmoid(obr2(obr1(proj(S*))) + X) proj: 2HW → C, broadcast over H×W
/// ```
#[derive(Debug, Clone)]
pub struct SpaModule {
    conv_weight: ParamId,
    conv_bias: ParamId,
    proj_weight: ParamId,
    proj_bias: ParamId,
    pub(super) obr1: ObrBlock,
    pub(super) obr2: ObrBlock,
    gem: GemParams,
    channels: usize,
    bound_hw: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct SpaParts {
    pub b1: Var,
    pub b2: Var,
    pub pooled: Var,
    pub expanded: Var,
    pub output: Var,
}

impl SpaModule {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        bound_hw: (usize, usize),
        num_kernels: usize,
        gem: GemParams,
        rng: &mut R,
    ) -> Result<Self> {
        let hw = bound_hw.0 * bound_hw.1;
        if hw == 0 {
            return Err(DpaError::config(format!("{name}: empty spatial size")));
        }
        let conv_weight = store.add_normal(
            format!("{name}.conv_b1.weight"),
            &[hw, hw, 1, 1],
            hw,
            2f64.sqrt(),
            rng,
        )?;
        let conv_bias = store.add(format!("{name}.conv_b1.bias"), Tensor::zeros(&[hw])?);
        let proj_weight = store.add_normal(
            format!("{name}.expand.weight"),
            &[channels, 2 * hw, 1, 1],
            2 * hw,
            1.0,
            rng,
        )?;
        let proj_bias = store.add(format!("{name}.expand.bias"), Tensor::zeros(&[channels])?);
        let obr1 = ObrBlock::new(store, &format!("{name}.obr1"), channels, channels, num_kernels, rng)?;
        let obr2 = ObrBlock::new(store, &format!("{name}.obr2"), channels, channels, num_kernels, rng)?;
        Ok(SpaModule {
            conv_weight,
            conv_bias,
            proj_weight,
            proj_bias,
            obr1,
            obr2,
            gem,
            channels,
            bound_hw,
        })
    }

    pub fn bound_hw(&self) -> (usize, usize) {
        self.bound_hw
    }

    pub fn forward_parts(&self, cx: &mut Ctx, x: Var) -> Result<SpaParts> {
        let shape = cx.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(DpaError::shape(format!(
                "spatial-pooling attention expects N×{}×H×W, got {shape:?}",
                self.channels
            )));
        }
        if (shape[2], shape[3]) != self.bound_hw {
            return Err(DpaError::SpatialSizeMismatch {
                expected: self.bound_hw,
                got: (shape[2], shape[3]),
            });
        }
        let t = cx.tape;
        let avg = t.avg_pool(x, PoolAxis::Channel)?;
        let soft = t.soft_pool(x, PoolAxis::Channel, SoftMode::Scalar)?;
        let summed = t.add(avg, soft)?;
        let w = cx.param(self.conv_weight);
        let b = cx.param(self.conv_bias);
        let b1 = t.conv2d(summed, w, Some(b), Conv2dSpec::new(1, 0))?;

        let gem = t.gem_pool(x, PoolAxis::Channel, self.gem)?;
        let min = t.min_pool(x, PoolAxis::Channel)?;
        let b2 = t.sub(gem, min)?;

        let pooled = t.concat(&[b1, b2], 1)?;
        let pw = cx.param(self.proj_weight);
        let pb = cx.param(self.proj_bias);
        let expanded = t.conv2d(pooled, pw, Some(pb), Conv2dSpec::new(1, 0))?;
        let y = self.obr1.forward(cx, expanded)?;
        let y = self.obr2.forward(cx, y)?;
        let y = t.add(y, x)?;
        let output = t.sigmoid(y)?;
        Ok(SpaParts {
            b1,
            b2,
            pooled,
            expanded,
            output,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_parts(cx, x)?.output)
    }
}
