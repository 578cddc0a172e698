//! Minimal differentiable-computation substrate: dense tensors, a dynamic
//! reverse-mode tape, the layers the tracker needs, AdamW, and binary
//! checkpoints.

pub mod checkpoint;
mod conv;
mod error;
pub mod gradcheck;
pub mod init;
mod kernels;
mod ops;
pub mod optim;
mod params;
mod real;
mod sample;
mod tape;
mod tensor;

pub use error::{DiffError, DiffResult};
pub use ops::sigmoid_scalar;
pub use params::{Mounted, ParamId, ParamSet};
pub use real::Real;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

pub use conv::{conv_out_extent, PadMode};
