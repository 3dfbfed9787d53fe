//! Accelerating convolutional networks by low-rank response reconstruction.
//!
//! Each convolutional layer `y = W·x` is replaced by a `d′`-filter layer
//! followed by a 1×1 layer, `y ≈ P·(Qᵀ·W)·x + b`, where `M = P·Qᵀ` is solved in
//! closed form from sampled responses. See the README for an overview of the
//! solvers and the command-line tool.

pub mod bench;
pub mod decompose;
pub mod error;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod rank;
pub mod sampler;
pub mod spatial;
pub mod tensor;
pub mod toy;

pub use error::{Error, ErrorClass, Result};
