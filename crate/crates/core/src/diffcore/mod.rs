//! Differentiable operator substrate: forward kernels, their gradients, a
//! recording tape, and a finite-difference checker.

pub mod conv;
pub mod elementwise;
pub mod gradcheck;
pub mod norm;
pub mod pool;
pub mod resize;
pub mod tape;

pub use conv::{conv2d, depthwise_conv2d, transposed_conv2d, ConvParams, ConvSpec};
pub use elementwise::{activate, combine, dropout, Activation, Combine};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use norm::{batch_norm, BatchNormParams, Mode};
pub use pool::{pool, PoolKind};
pub use resize::{resize, ResizeKind};
pub use tape::{Backward, Grads, Tape, Var};
