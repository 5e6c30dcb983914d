//! Reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor) values.

mod batchnorm;
mod conv;
mod gemm;
mod gradcheck;
mod ops;
mod param;
mod tape;

pub use batchnorm::{BatchNormSpec, Mode, RunningStats};
pub use conv::{conv2d_tensor, Conv2dSpec};
pub use gradcheck::{grad_check, grad_check_module, relative_error, GradCheckOptions};
pub(crate) use ops::narrow_tensor;
pub use param::{Ctx, ParamId, ParamStore, Parameter, StatsId};
pub use tape::{Backward, Gradients, Tape, Var};
