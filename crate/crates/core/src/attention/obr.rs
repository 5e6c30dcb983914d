use rand::Rng;

use crate::autodiff::{Conv2dSpec, Ctx, ParamId, ParamStore, StatsId, Var};
use crate::error::{DpaError, Result};

const KERNEL: usize = 3;

/// Dynamic 3×3 convolution followed by batch norm and ReLU.
///
/// The convolution kernel of each sample is a convex mixture of `K`
/// candidate kernels. Mixing weights come from a squeeze path: global average
/// pool, a `C_in → K` linear layer, softmax over `K`.
#[derive(Debug, Clone)]
pub struct ObrBlock {
    /// `K × (C_out·C_in·3·3)`, one flattened candidate per row.
    kernels: ParamId,
    att_weight: ParamId,
    att_bias: ParamId,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    bn_stats: StatsId,
    c_in: usize,
    c_out: usize,
    num_kernels: usize,
}

impl ObrBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        num_kernels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_kernels == 0 || c_in == 0 || c_out == 0 {
            return Err(DpaError::config(format!(
                "OBR block {name}: channels and kernel count must be positive"
            )));
        }
        let fan_in = c_in * KERNEL * KERNEL;
        let kernels = store.add_normal(
            format!("{name}.kernels"),
            &[num_kernels, c_out * fan_in],
            fan_in,
            2f64.sqrt(),
            rng,
        )?;
        let att_weight = store.add_normal(
            format!("{name}.attention.weight"),
            &[c_in, num_kernels],
            c_in,
            1.0,
            rng,
        )?;
        let att_bias = store.add(format!("{name}.attention.bias"), crate::Tensor::zeros(&[num_kernels])?);
        let bn_gamma = store.add(format!("{name}.bn.weight"), crate::Tensor::ones(&[c_out])?);
        let bn_beta = store.add(format!("{name}.bn.bias"), crate::Tensor::zeros(&[c_out])?);
        let bn_stats = store.add_stats(format!("{name}.bn"), c_out);
        Ok(ObrBlock {
            kernels,
            att_weight,
            att_bias,
            bn_gamma,
            bn_beta,
            bn_stats,
            c_in,
            c_out,
            num_kernels,
        })
    }

    pub fn num_kernels(&self) -> usize {
        self.num_kernels
    }

    pub fn kernels_param(&self) -> ParamId {
        self.kernels
    }

    /// Per-sample kernel mixing weights, `N×K`, rows summing to one.
    pub fn mixing_weights(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let squeezed = cx.tape.mean(x, &[2, 3], false)?;
        let w = cx.param(self.att_weight);
        let b = cx.param(self.att_bias);
        let logits = cx.tape.matmul(squeezed, w)?;
        let logits = cx.tape.add(logits, b)?;
        cx.tape.softmax(logits, 1)
    }

    /// Dynamic convolution only (no BN/ReLU), padding 1.
    pub fn dynamic_conv(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.c_in {
            return Err(DpaError::shape(format!(
                "OBR block expects N×{}×H×W, got {shape:?}",
                self.c_in
            )));
        }
        let n = shape[0];
        let weights = self.mixing_weights(cx, x)?;
        let candidates = cx.param(self.kernels);
        let mixed = cx.tape.matmul(weights, candidates)?;
        let spec = Conv2dSpec::same(KERNEL);
        if n == 1 {
            let k = cx.tape.reshape(mixed, &[self.c_out, self.c_in, KERNEL, KERNEL])?;
            return cx.tape.conv2d(x, k, None, spec);
        }
        cx.tape.batched_conv2d(x, mixed, self.c_out, KERNEL, spec)
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.dynamic_conv(cx, x)?;
        let y = cx.batchnorm(y, self.bn_gamma, self.bn_beta, self.bn_stats)?;
        cx.tape.relu(y)
    }
}
