//! Dual-pooling attention (channel- and spatial-pooling attention) for
//! vehicle re-identification, built on a small reverse-mode tensor engine.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod model;
pub mod pooling;
pub mod tensor;

pub use error::{DpaError, Result};
pub use tensor::Tensor;
