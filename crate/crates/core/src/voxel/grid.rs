use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Grid extent `(dx, dy, dz)` in voxels.
pub type Dims = [usize; 3];

/// Voxel size `(sx, sy, sz)` in millimeters.
pub type Spacing = [f32; 3];

/// Population a shape belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Young,
    OldNonsarcopenic,
    Sarcopenic,
    SyntheticNormal,
    SyntheticAnomalous,
    /// No label attached, e.g. a grid obtained by thresholding a prediction.
    Unlabeled,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Young,
        Group::OldNonsarcopenic,
        Group::Sarcopenic,
        Group::SyntheticNormal,
        Group::SyntheticAnomalous,
        Group::Unlabeled,
    ];

    pub fn code(self) -> u8 {
        match self {
            Group::Young => 0,
            Group::OldNonsarcopenic => 1,
            Group::Sarcopenic => 2,
            Group::SyntheticNormal => 3,
            Group::SyntheticAnomalous => 4,
            Group::Unlabeled => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.code() == code)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Young => "young",
            Group::OldNonsarcopenic => "old_nonsarcopenic",
            Group::Sarcopenic => "sarcopenic",
            Group::SyntheticNormal => "synthetic_normal",
            Group::SyntheticAnomalous => "synthetic_anomalous",
            Group::Unlabeled => "unlabeled",
        }
    }

    /// Groups that must never be used to train the prior.
    pub fn is_anomalous(self) -> bool {
        matches!(self, Group::Sarcopenic | Group::SyntheticAnomalous)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown group '{s}'")))
    }
}

fn check_geometry(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::contract(format!("grid dims {dims:?} must all be >= 1")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::contract(format!("grid spacing {spacing:?} must be positive")));
    }
    Ok(())
}

/// Binary occupancy volume.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dims: Dims,
    spacing: Spacing,
    occupancy: Vec<bool>,
    pub subject_id: String,
    pub group: Group,
}

impl VoxelGrid {
    pub fn new(
        dims: Dims,
        spacing: Spacing,
        occupancy: Vec<bool>,
        subject_id: impl Into<String>,
        group: Group,
    ) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if occupancy.len() != n {
            return Err(Error::contract(format!(
                "occupancy has {} voxels, dims {dims:?} need {n}",
                occupancy.len()
            )));
        }
        Ok(VoxelGrid {
            dims,
            spacing,
            occupancy,
            subject_id: subject_id.into(),
            group,
        })
    }

    pub fn empty(dims: Dims, spacing: Spacing) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![false; n], "", Group::Unlabeled)
    }

    /// Grid whose voxel `(i, j, k)` is occupied iff `inside(i, j, k)`.
    pub fn from_fn(dims: Dims, spacing: Spacing, mut inside: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let mut occupancy = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    occupancy.push(inside(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, occupancy, "", Group::Unlabeled)
    }

    pub fn with_label(mut self, subject_id: impl Into<String>, group: Group) -> Self {
        self.subject_id = subject_id.into();
        self.group = group;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn voxel_count(&self) -> usize {
        self.occupancy.len()
    }

    pub(crate) fn occupancy_mut(&mut self) -> &mut [bool] {
        &mut self.occupancy
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn is_empty_shape(&self) -> bool {
        !self.occupancy.iter().any(|&o| o)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.occupancy[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: bool) {
        let idx = self.index(i, j, k);
        self.occupancy[idx] = value;
    }

    /// Occupancy as 0/1 reals in storage order.
    pub fn as_targets(&self) -> Vec<f64> {
        self.occupancy.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect()
    }
}

/// Per-voxel occupancy probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbGrid {
    dims: Dims,
    spacing: Spacing,
    probs: Vec<f64>,
}

impl ProbGrid {
    pub fn new(dims: Dims, spacing: Spacing, probs: Vec<f64>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if probs.len() != n {
            return Err(Error::contract(format!(
                "prob grid has {} voxels, dims {dims:?} need {n}",
                probs.len()
            )));
        }
        if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract(format!(
                "probability {} at voxel {i} outside [0, 1]",
                probs[i]
            )));
        }
        Ok(ProbGrid { dims, spacing, probs })
    }

    pub fn uniform(dims: Dims, spacing: Spacing, p: f64) -> Result<Self> {
        Self::new(dims, spacing, vec![p; dims.iter().product()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn voxel_count(&self) -> usize {
        self.probs.len()
    }
}

/// Occupies a voxel iff its probability is strictly above `threshold`.
pub fn binarize(p: &ProbGrid, threshold: f64) -> Result<VoxelGrid> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!("threshold {threshold} must lie in (0, 1)")));
    }
    let occ = p.probs.iter().map(|&v| v > threshold).collect();
    VoxelGrid::new(p.dims, p.spacing, occ, "", Group::Unlabeled)
}

/// Voxel-center coordinate in `[-1, 1]^3`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedCoord([f64; 3]);

impl NormalizedCoord {
    pub fn new(c: [f64; 3]) -> Result<Self> {
        if c.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::contract(format!("coordinate {c:?} outside [-1, 1]^3")));
        }
        Ok(NormalizedCoord(c))
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }
}

fn axis_center(i: usize, d: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / d as f64
}

/// Center of voxel `(i, j, k)` mapped to `c = -1 + (2i + 1) / D` per axis.
pub fn normalize_coords(dims: Dims, index: [usize; 3]) -> Result<NormalizedCoord> {
    if index.iter().zip(dims).any(|(&i, d)| i >= d) {
        return Err(Error::contract(format!("voxel {index:?} outside dims {dims:?}")));
    }
    Ok(NormalizedCoord([
        axis_center(index[0], dims[0]),
        axis_center(index[1], dims[1]),
        axis_center(index[2], dims[2]),
    ]))
}

/// Normalized centers of every voxel, in storage order.
pub fn voxel_centers(dims: Dims) -> Vec<NormalizedCoord> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        let z = axis_center(k, dims[2]);
        for j in 0..dims[1] {
            let y = axis_center(j, dims[1]);
            for i in 0..dims[0] {
                out.push(NormalizedCoord([axis_center(i, dims[0]), y, z]));
            }
        }
    }
    out
}
