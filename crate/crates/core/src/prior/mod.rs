//! The conditional occupancy network `f(x, z)`.
//!
//! An MLP maps a normalized voxel center `x` and a shape latent `z` to the
//! probability that the voxel lies inside the shape. Hidden layers use ReLU,
//! the output goes through a sigmoid, and the 3D coordinates are concatenated
//! once more to the output of the skip layer.

mod checkpoint;
mod loss;
mod model;

pub use checkpoint::{
    read_checkpoint, read_latent_table, write_checkpoint, write_latent_table, CheckpointMeta, LatentEntry,
};
pub use loss::{compute_loss, LossBreakdown, LossWeights, SOFT_DICE_EPS};
pub use model::{
    coords_matrix, loss_and_grads, Architecture, GradRequest, LatentCode, LossEval, ShapeKey, ShapePriorModel,
    ShapeTarget,
};
