use rand::Rng;

use super::obr::ObrBlock;
use crate::autodiff::{Conv2dSpec, Ctx, ParamId, ParamStore, Var};
use crate::error::{DpaError, Result};
use crate::pooling::{GemParams, PoolAxis, SoftMode};
use crate::Tensor;

/// Channel-pooling attention.
///
/// ```text
/// a1 = conv1x1(avg(X) + soft_map(X))      N×C×H×W
/// a2 = gem(X) - min(X)                    N×C×1×1
/// C* = a1 ⊙ a2
/// X' = sigmoid(obr2(obr1(C*)) + X)
/// ```
#[derive(Debug, Clone)]
pub struct CpaModule {
    conv_weight: ParamId,
    conv_bias: ParamId,
    pub(super) obr1: ObrBlock,
    pub(super) obr2: ObrBlock,
    gem: GemParams,
    channels: usize,
}

/// Intermediate maps of one channel-pooling pass.
#[derive(Debug, Clone, Copy)]
pub struct CpaParts {
    pub a1: Var,
    pub a2: Var,
    pub attention_map: Var,
    pub output: Var,
}

impl CpaModule {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        num_kernels: usize,
        gem: GemParams,
        rng: &mut R,
    ) -> Result<Self> {
        let conv_weight = store.add_normal(
            format!("{name}.conv_a1.weight"),
            &[channels, channels, 1, 1],
            channels,
            2f64.sqrt(),
            rng,
        )?;
        let conv_bias = store.add(format!("{name}.conv_a1.bias"), Tensor::zeros(&[channels])?);
        let obr1 = ObrBlock::new(store, &format!("{name}.obr1"), channels, channels, num_kernels, rng)?;
        let obr2 = ObrBlock::new(store, &format!("{name}.obr2"), channels, channels, num_kernels, rng)?;
        Ok(CpaModule {
            conv_weight,
            conv_bias,
            obr1,
            obr2,
            gem,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward_parts(&self, cx: &mut Ctx, x: Var) -> Result<CpaParts> {
        let shape = cx.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(DpaError::shape(format!(
                "channel-pooling attention expects N×{}×H×W, got {shape:?}",
                self.channels
            )));
        }
        let t = cx.tape;
        let avg = t.avg_pool(x, PoolAxis::Spatial)?;
        let soft = t.soft_pool(x, PoolAxis::Spatial, SoftMode::RetainedMap)?;
        let summed = t.add(avg, soft)?;
        let w = cx.param(self.conv_weight);
        let b = cx.param(self.conv_bias);
        let a1 = t.conv2d(summed, w, Some(b), Conv2dSpec::new(1, 0))?;

        let gem = t.gem_pool(x, PoolAxis::Spatial, self.gem)?;
        let min = t.min_pool(x, PoolAxis::Spatial)?;
        let a2 = t.sub(gem, min)?;

        let attention_map = t.mul(a1, a2)?;
        let y = self.obr1.forward(cx, attention_map)?;
        let y = self.obr2.forward(cx, y)?;
        let y = t.add(y, x)?;
        let output = t.sigmoid(y)?;
        Ok(CpaParts {
            a1,
            a2,
            attention_map,
            output,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_parts(cx, x)?.output)
    }
}
