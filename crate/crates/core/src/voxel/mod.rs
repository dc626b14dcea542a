//! Occupancy and probability grids, voxel-center coordinates, the overlap and
//! volume metrics, and the `VOXL1` file format.
//!
//! Voxels are always stored and iterated x-fastest: the linear index of
//! `(i, j, k)` is `i + dx * (j + dy * k)`.

mod format;
mod grid;
mod metrics;

pub use format::{read_voxl, write_binary, write_prob, VoxlRecord, VOXL_MAGIC};
pub use grid::{binarize, normalize_coords, voxel_centers, Dims, Group, NormalizedCoord, ProbGrid, Spacing, VoxelGrid};
pub use metrics::{dice_score, surface_faces, vol_err, volume_cm3, VolumeError};
