//! Dense matrix math, reverse-mode gradients and Adam.
//!
//! Everything is computed in `f64`. All reductions run sequentially in index
//! order and the GEMM kernel is single-threaded, so a given sequence of
//! operations is bit-reproducible across runs on the same build.

mod adam;
mod matrix;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::{Activation, DenseMatrix};
pub use tape::{GradTape, Gradients, Var};
