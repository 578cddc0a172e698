//! Joint multi-point video tracking.
//!
//! A factorized time/track transformer with proxy tokens iteratively refines
//! track positions, visibility, and appearance over sliding windows. The
//! crate bundles the differentiable substrate, the coordinate-mapping
//! algebra, a synthetic training world with exact ground truth, the unrolled
//! training loop, and the tracking-metrics suite.

pub mod coordmap;
pub mod encoder;
pub mod diffcore;

pub use diffcore::{DiffError, DiffResult, Tensor};
