//! Minimal dense tensor engine that runs a [`LayerGraph`](crate::graph::LayerGraph)
//! forward and backward.
//!
//! All arithmetic is `f64`, so the same code path serves training and
//! finite-difference checking. Convolutions go through im2col and a matrix
//! product; [`ops::conv2d_reference`] is a direct loop implementation kept
//! for cross-checking.

mod exec;
pub mod gradcheck;
pub mod ops;
mod params;
mod tensor;

pub use exec::{backward, forward, forward_eval, forward_train, ForwardCache, ForwardOptions, Mode};
pub use gradcheck::{gradcheck, gradcheck_with, GradcheckOptions, GradcheckReport};
pub use params::{init_params, Param, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::Tensor;
