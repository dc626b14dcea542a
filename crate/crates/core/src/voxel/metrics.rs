use super::grid::VoxelGrid;
use crate::{Error, Result};

/// Dice overlap `2|A∩B| / (|A| + |B|)`; two empty grids score 1.
pub fn dice_score(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!(
            "dice on dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.occupancy().iter().zip(b.occupancy()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Occupied volume in cm³.
pub fn volume_cm3(g: &VoxelGrid) -> f64 {
    let [sx, sy, sz] = g.spacing();
    g.occupied_count() as f64 * (sx as f64 * sy as f64 * sz as f64) / 1000.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeError {
    pub cm3: f64,
    /// `None` when the reference volume is zero and a relative error is undefined.
    pub pct: Option<f64>,
}

/// Absolute and relative volume error of `pred` against `gt`.
pub fn vol_err(gt: &VoxelGrid, pred: &VoxelGrid) -> VolumeError {
    volume_error_from(volume_cm3(gt), volume_cm3(pred))
}

pub(crate) fn volume_error_from(v_gt: f64, v_pred: f64) -> VolumeError {
    let cm3 = (v_gt - v_pred).abs();
    let pct = (v_gt > 0.0).then(|| 100.0 * cm3 / v_gt);
    VolumeError { cm3, pct }
}

/// Number of voxel faces separating an occupied voxel from an empty one or
/// from the outside of the grid.
pub fn surface_faces(g: &VoxelGrid) -> usize {
    let [dx, dy, dz] = g.dims();
    let mut faces = 0;
    for k in 0..dz {
        for j in 0..dy {
            for i in 0..dx {
                if !g.get(i, j, k) {
                    continue;
                }
                let empty = |ii: isize, jj: isize, kk: isize| {
                    ii < 0
                        || jj < 0
                        || kk < 0
                        || ii >= dx as isize
                        || jj >= dy as isize
                        || kk >= dz as isize
                        || !g.get(ii as usize, jj as usize, kk as usize)
                };
                let (i, j, k) = (i as isize, j as isize, k as isize);
                faces += [
                    empty(i - 1, j, k),
                    empty(i + 1, j, k),
                    empty(i, j - 1, k),
                    empty(i, j + 1, k),
                    empty(i, j, k - 1),
                    empty(i, j, k + 1),
                ]
                .iter()
                .filter(|&&e| e)
                .count();
            }
        }
    }
    faces
}
