//! Implicit occupancy shape prior over binary voxel populations.
//!
//! A conditional MLP `f(x, z) -> [0, 1]` is trained as an auto-decoder: every
//! training volume owns a latent code that is optimized jointly with the
//! shared network weights. Unseen volumes are encoded by optimizing a fresh
//! latent against the frozen network. The reconstruction Dice of that fit and
//! the position of the latent in an LDA projection are used to flag shapes
//! that fall outside the learned population.
//!
//! Module map:
//! - [`tensor`]: dense matrices, a reverse-mode gradient tape, Adam.
//! - [`voxel`]: occupancy/probability grids, metrics, the `VOXL1` format.
//! - [`prior`]: the conditional occupancy network, its loss and `INRC1` checkpoints.
//! - [`train`]: joint auto-decoder optimization.
//! - [`infer`]: frozen-network latent optimization for new shapes.
//! - [`anomaly`]: threshold calibration, ROC-AUC and LDA projection.
//! - [`synth`]: procedural shape populations and subject-wise folds.

pub mod anomaly;
pub mod error;
pub mod infer;
pub mod prior;
mod seed;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
