//! Procedural populations of elongated, muscle-like solids, and the
//! subject-wise fold splitter used for cross-validation.
//!
//! Normal shapes are tapered superellipsoid spindles with a gentle bend;
//! each scan of a subject applies a small area-preserving squash across the
//! long axis. Anomalous shapes start from the same family, then receive
//! band-limited boundary roughness and a few notches, rescaled so their
//! volume stays close to the unperturbed base.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::voxel::{surface_faces, Dims, Group, Spacing, VoxelGrid};
use crate::{seed, Error, Result};

const MAX_ANOMALY_ATTEMPTS: usize = 24;
const VOLUME_TOLERANCE: f64 = 0.15;
const MIN_OCCUPANCY: f64 = 0.03;
const MAX_OCCUPANCY: f64 = 0.4;

/// Closed interval `[lo, hi]`, written as a two-element array in configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        ParamRange { lo, hi }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && 0.0 <= self.lo && self.lo <= self.hi && self.hi > 0.0) {
            return Err(Error::config(format!(
                "range {name} = [{}, {}] must satisfy 0 <= lo <= hi, hi > 0",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }

    fn sample_int(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.lo.round() as usize..=self.hi.round() as usize)
    }
}

impl From<[f64; 2]> for ParamRange {
    fn from([lo, hi]: [f64; 2]) -> Self {
        ParamRange { lo, hi }
    }
}

impl From<ParamRange> for [f64; 2] {
    fn from(r: ParamRange) -> Self {
        [r.lo, r.hi]
    }
}

/// Normal shape family, in normalized grid units (the grid spans [-1, 1]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalShapeParams {
    /// Half-length along the long (z) axis.
    pub half_length: ParamRange,
    /// Cross-section semi-axes at the widest point.
    pub radius_x: ParamRange,
    pub radius_y: ParamRange,
    /// Superellipse exponent of the cross-section.
    pub exponent: ParamRange,
    /// Relative thinning of the distal end.
    pub taper: ParamRange,
    /// Peak lateral displacement of the centerline.
    pub bend: ParamRange,
    /// Per-scan compression across the long axis, as a fraction.
    pub squash: ParamRange,
}

impl Default for NormalShapeParams {
    fn default() -> Self {
        NormalShapeParams {
            half_length: ParamRange::new(0.78, 0.9),
            radius_x: ParamRange::new(0.46, 0.56),
            radius_y: ParamRange::new(0.36, 0.45),
            exponent: ParamRange::new(2.0, 2.8),
            taper: ParamRange::new(0.2, 0.45),
            bend: ParamRange::new(0.0, 0.12),
            squash: ParamRange::new(0.0, 0.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyParams {
    /// Peak boundary displacement relative to the local radius.
    pub roughness_amplitude: ParamRange,
    /// Angular frequency (lobes per turn) of the boundary noise.
    pub roughness_frequency: ParamRange,
    pub notch_count: ParamRange,
    /// Notch depth relative to the local radius.
    pub notch_depth: ParamRange,
}

impl Default for AnomalyParams {
    fn default() -> Self {
        AnomalyParams {
            roughness_amplitude: ParamRange::new(0.2, 0.3),
            roughness_frequency: ParamRange::new(3.0, 7.0),
            notch_count: ParamRange::new(1.0, 3.0),
            notch_depth: ParamRange::new(0.35, 0.6),
        }
    }
}

/// A normal subpopulation; subjects are dealt to cohorts round-robin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cohort {
    pub group: Group,
    /// Multiplies both cross-section radii.
    pub radius_scale: f64,
    /// Multiplies the half-length.
    pub length_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSpec {
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub dims: Dims,
    pub spacing: Spacing,
    pub scans_per_subject: usize,
    pub normal: NormalShapeParams,
    pub anomaly: AnomalyParams,
    pub cohorts: Vec<Cohort>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec {
            n_normal: 25,
            n_anomalous: 5,
            dims: [48, 48, 48],
            spacing: [2.0, 2.0, 2.0],
            scans_per_subject: 3,
            normal: NormalShapeParams::default(),
            anomaly: AnomalyParams::default(),
            cohorts: vec![
                Cohort {
                    group: Group::Young,
                    radius_scale: 1.0,
                    length_scale: 1.0,
                },
                Cohort {
                    group: Group::OldNonsarcopenic,
                    radius_scale: 0.88,
                    length_scale: 0.95,
                },
            ],
            seed: 0,
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::config(format!("grid dims {:?} must be >= 4", self.dims)));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config(format!("spacing {:?} must be positive", self.spacing)));
        }
        if self.scans_per_subject == 0 {
            return Err(Error::config("scans_per_subject must be >= 1"));
        }
        let n = &self.normal;
        for (name, r) in [
            ("half_length", n.half_length),
            ("radius_x", n.radius_x),
            ("radius_y", n.radius_y),
            ("exponent", n.exponent),
            ("taper", n.taper),
            ("bend", n.bend),
            ("squash", n.squash),
        ] {
            r.validate(name)?;
        }
        if n.squash.hi >= 1.0 || n.taper.hi >= 1.0 {
            return Err(Error::config("squash and taper must stay below 1"));
        }
        if n.exponent.lo < 1.0 {
            return Err(Error::config("superellipse exponent must be >= 1 to stay convex"));
        }
        let a = &self.anomaly;
        for (name, r) in [
            ("roughness_amplitude", a.roughness_amplitude),
            ("roughness_frequency", a.roughness_frequency),
            ("notch_count", a.notch_count),
            ("notch_depth", a.notch_depth),
        ] {
            r.validate(name)?;
        }
        if a.roughness_amplitude.hi >= 0.8 || a.notch_depth.hi >= 0.9 {
            return Err(Error::config("roughness amplitude must be < 0.8 and notch depth < 0.9"));
        }
        if self.cohorts.is_empty() {
            return Err(Error::config("at least one normal cohort is required"));
        }
        for c in &self.cohorts {
            if c.group.is_anomalous() || c.group == Group::Unlabeled {
                return Err(Error::config(format!("cohort group {} is not a normal group", c.group)));
            }
            if !(c.radius_scale > 0.0
                && c.radius_scale.is_finite()
                && c.length_scale > 0.0
                && c.length_scale.is_finite())
            {
                return Err(Error::config("cohort scales must be positive"));
            }
        }
        Ok(())
    }

    fn cohort(&self, index: usize) -> Result<&Cohort> {
        self.cohorts
            .get(index)
            .ok_or_else(|| Error::contract(format!("cohort {index} out of range ({} cohorts)", self.cohorts.len())))
    }
}

/// Seed and cohort of one synthetic subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubjectSeed {
    pub seed: u64,
    pub cohort: usize,
}

#[derive(Clone, Copy, Debug)]
struct SpindleParams {
    half_length: f64,
    rx: f64,
    ry: f64,
    exponent: f64,
    taper: f64,
    bend: f64,
    bend_dir: f64,
    roll: f64,
}

impl SpindleParams {
    fn draw(spec: &PopulationSpec, subject: SubjectSeed) -> Result<Self> {
        let cohort = spec.cohort(subject.cohort)?;
        let p = &spec.normal;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(subject.seed, 0));
        Ok(SpindleParams {
            half_length: (p.half_length.sample(&mut rng) * cohort.length_scale).min(0.98),
            rx: p.radius_x.sample(&mut rng) * cohort.radius_scale,
            ry: p.radius_y.sample(&mut rng) * cohort.radius_scale,
            exponent: p.exponent.sample(&mut rng),
            taper: p.taper.sample(&mut rng),
            bend: p.bend.sample(&mut rng),
            bend_dir: rng.gen_range(0.0..2.0 * PI),
            roll: rng.gen_range(-0.3..0.3),
        })
    }
}

/// Boundary modulation factor as a function of axial position `t` in
/// [-1, 1] and cross-section angle.
#[derive(Clone, Debug, Default)]
struct Roughness {
    waves: Vec<(f64, f64, f64, f64, f64)>,
    notches: Vec<(f64, f64, f64)>,
}

impl Roughness {
    fn draw(params: &AnomalyParams, rng: &mut impl Rng) -> Self {
        let amplitude = params.roughness_amplitude.sample(rng);
        let n_waves = 3;
        let raw: Vec<f64> = (0..n_waves).map(|_| rng.gen_range(0.5..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let waves = raw
            .iter()
            .map(|w| {
                let k = params.roughness_frequency.sample(rng).round().max(1.0);
                let omega = rng.gen_range(1.0..4.0);
                (
                    amplitude * w / total,
                    k,
                    rng.gen_range(0.0..2.0 * PI),
                    omega,
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let notches = (0..params.notch_count.sample_int(rng))
            .map(|_| {
                (
                    params.notch_depth.sample(rng),
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(-PI..PI),
                )
            })
            .collect();
        Roughness { waves, notches }
    }

    fn factor(&self, t: f64, theta: f64) -> f64 {
        let mut m = 1.0;
        for &(a, k, phase, omega, axial_phase) in &self.waves {
            m += a * (k * theta + phase).cos() * (PI * omega * t + axial_phase).cos();
        }
        for &(depth, t0, theta0) in &self.notches {
            let dtheta = (theta - theta0 + PI).rem_euclid(2.0 * PI) - PI;
            let g = (-(t - t0).powi(2) / (2.0 * 0.12f64.powi(2)) - dtheta.powi(2) / (2.0 * 0.35f64.powi(2))).exp();
            m *= 1.0 - depth * g;
        }
        m.max(0.2)
    }
}

fn scan_squash(spec: &PopulationSpec, subject: SubjectSeed, scan_index: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(subject.seed, 1000 + scan_index as u64));
    spec.normal.squash.sample(&mut rng)
}

fn rasterize(
    spec: &PopulationSpec,
    p: &SpindleParams,
    squash: f64,
    roughness: Option<&Roughness>,
    scale: f64,
) -> Result<VoxelGrid> {
    let sx = (1.0 - squash).sqrt();
    let sy = 1.0 / (1.0 - squash);
    let (sin_r, cos_r) = p.roll.sin_cos();
    let grid = VoxelGrid::from_fn(spec.dims, spec.spacing, |i, j, k| {
        let center = |n: usize, d: usize| -1.0 + (2 * n + 1) as f64 / d as f64;
        let [dx_, dy_, dz_] = spec.dims;
        let (x, y, z): (f64, f64, f64) = (center(i, dx_) * sx, center(j, dy_) * sy, center(k, dz_));
        let t = z / p.half_length;
        if t.abs() >= 1.0 {
            return false;
        }
        let arc = p.bend * (1.0 - t * t);
        let dx0 = x - arc * p.bend_dir.cos();
        let dy0 = y - arc * p.bend_dir.sin();
        let dx = cos_r * dx0 + sin_r * dy0;
        let dy = -sin_r * dx0 + cos_r * dy0;
        let profile = (1.0 - t * t).sqrt() * (1.0 - 0.5 * p.taper * (1.0 + t));
        let mut r = profile * scale;
        if let Some(rough) = roughness {
            r *= rough.factor(t, (dy / p.ry).atan2(dx / p.rx));
        }
        if r <= 0.0 {
            return false;
        }
        (dx.abs() / (p.rx * r)).powf(p.exponent) + (dy.abs() / (p.ry * r)).powf(p.exponent) <= 1.0
    })?;
    Ok(largest_component(&grid))
}

/// Keeps only the largest 6-connected component.
pub fn largest_component(grid: &VoxelGrid) -> VoxelGrid {
    let components = components(grid);
    let Some(best) = components.iter().max_by_key(|c| c.len()) else {
        return grid.clone();
    };
    let mut out = VoxelGrid::empty(grid.dims(), grid.spacing()).expect("dims come from a valid grid");
    for &idx in best {
        out.occupancy_mut()[idx] = true;
    }
    out.subject_id = grid.subject_id.clone();
    out.group = grid.group;
    out
}

/// Flat indices of each 6-connected component of occupied voxels.
pub fn components(grid: &VoxelGrid) -> Vec<Vec<usize>> {
    let [dx, dy, dz] = grid.dims();
    let occ = grid.occupancy();
    let mut seen = vec![false; occ.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..occ.len() {
        if !occ[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(idx) = queue.pop_front() {
            comp.push(idx);
            let (i, j, k) = (idx % dx, (idx / dx) % dy, idx / (dx * dy));
            let mut visit = |n: usize| {
                if occ[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if i > 0 {
                visit(idx - 1);
            }
            if i + 1 < dx {
                visit(idx + 1);
            }
            if j > 0 {
                visit(idx - dx);
            }
            if j + 1 < dy {
                visit(idx + dx);
            }
            if k > 0 {
                visit(idx - dx * dy);
            }
            if k + 1 < dz {
                visit(idx + dx * dy);
            }
        }
        out.push(comp);
    }
    out
}

fn check_occupancy(grid: &VoxelGrid) -> Result<()> {
    let frac = grid.occupied_count() as f64 / grid.voxel_count() as f64;
    if grid.is_empty_shape() {
        return Err(Error::config("shape parameters produce an empty grid"));
    }
    if !(MIN_OCCUPANCY..=MAX_OCCUPANCY).contains(&frac) {
        return Err(Error::config(format!(
            "occupancy fraction {frac:.4} outside [{MIN_OCCUPANCY}, {MAX_OCCUPANCY}]; adjust the shape ranges"
        )));
    }
    Ok(())
}

/// A smooth normal shape for one scan of one subject.
pub fn gen_normal_shape(spec: &PopulationSpec, subject: SubjectSeed, scan_index: usize) -> Result<VoxelGrid> {
    spec.validate()?;
    let params = SpindleParams::draw(spec, subject)?;
    let grid = rasterize(spec, &params, scan_squash(spec, subject, scan_index), None, 1.0)?;
    check_occupancy(&grid)?;
    Ok(grid)
}

/// An anomalous shape together with the normal base it was derived from.
#[derive(Clone, Debug)]
pub struct AnomalousShape {
    pub grid: VoxelGrid,
    pub base: VoxelGrid,
}

/// Surface faces per occupied voxel.
pub fn surface_to_volume(grid: &VoxelGrid) -> f64 {
    surface_faces(grid) as f64 / grid.occupied_count().max(1) as f64
}

/// A rough, notched shape whose volume stays within 15% of its smooth base.
pub fn gen_anomalous_shape(spec: &PopulationSpec, subject: SubjectSeed, scan_index: usize) -> Result<AnomalousShape> {
    spec.validate()?;
    let params = SpindleParams::draw(spec, subject)?;
    let squash = scan_squash(spec, subject, scan_index);
    let base = rasterize(spec, &params, squash, None, 1.0)?;
    check_occupancy(&base)?;
    let base_volume = base.occupied_count() as f64;
    let base_ratio = surface_to_volume(&base);

    // Roughness is a property of the subject, shared by all of its scans.
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(subject.seed, 1));
    for _ in 0..MAX_ANOMALY_ATTEMPTS {
        let roughness = Roughness::draw(&spec.anomaly, &mut rng);
        let mut scale = 1.0;
        let mut grid = rasterize(spec, &params, squash, Some(&roughness), scale)?;
        for _ in 0..4 {
            let v = grid.occupied_count() as f64;
            if v == 0.0 || ((v - base_volume) / base_volume).abs() < 0.02 {
                break;
            }
            scale *= (base_volume / v).sqrt();
            grid = rasterize(spec, &params, squash, Some(&roughness), scale)?;
        }
        let v = grid.occupied_count() as f64;
        if v > 0.0
            && ((v - base_volume) / base_volume).abs() <= VOLUME_TOLERANCE
            && surface_to_volume(&grid) > base_ratio
            && check_occupancy(&grid).is_ok()
        {
            return Ok(AnomalousShape { grid, base });
        }
    }
    Err(Error::config(format!(
        "no anomalous shape within {}% of its base volume after {MAX_ANOMALY_ATTEMPTS} attempts",
        VOLUME_TOLERANCE * 100.0
    )))
}

/// One generated scan.
#[derive(Clone, Debug)]
pub struct PopulationMember {
    pub subject_id: String,
    pub scan_index: u32,
    pub grid: VoxelGrid,
}

/// Subject list of a population: ids, groups and seeds, without shapes.
pub fn population_subjects(spec: &PopulationSpec) -> Vec<(String, Group, SubjectSeed)> {
    let n_cohorts = spec.cohorts.len().max(1);
    let normal = (0..spec.n_normal).map(|i| {
        let cohort = i % n_cohorts;
        let group = spec.cohorts.get(cohort).map_or(Group::SyntheticNormal, |c| c.group);
        let s = SubjectSeed {
            seed: seed::derive(spec.seed, i as u64),
            cohort,
        };
        (format!("n{i:03}"), group, s)
    });
    let anomalous = (0..spec.n_anomalous).map(|i| {
        let s = SubjectSeed {
            seed: seed::derive(spec.seed, (1 << 32) + i as u64),
            cohort: i % n_cohorts,
        };
        (format!("a{i:03}"), Group::SyntheticAnomalous, s)
    });
    normal.chain(anomalous).collect()
}

/// Every scan of every subject, normals first, in subject then scan order.
pub fn generate_population(spec: &PopulationSpec) -> Result<Vec<PopulationMember>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (id, group, subject) in population_subjects(spec) {
        for scan in 0..spec.scans_per_subject {
            let grid = if group.is_anomalous() {
                gen_anomalous_shape(spec, subject, scan)?.grid
            } else {
                gen_normal_shape(spec, subject, scan)?
            };
            out.push(PopulationMember {
                subject_id: id.clone(),
                scan_index: scan as u32,
                grid: grid.with_label(id.clone(), group),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Fold>,
}

/// Subject-wise k-fold split of the normal subjects; anomalous subjects are
/// placed in the test set of every fold and never in training.
///
/// Normal subjects are shuffled within their group and interleaved in
/// proportion to group size before the contiguous partition, so each test
/// fold keeps roughly the population's group mix.
pub fn make_folds(subjects: &[(String, Group)], k: usize, seed: u64) -> Result<FoldPlan> {
    let mut by_group: BTreeMap<Group, Vec<String>> = BTreeMap::new();
    let mut anomalous = Vec::new();
    let mut ids: Vec<&String> = subjects.iter().map(|(id, _)| id).collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::contract("duplicate subject id in fold input"));
    }
    for (id, g) in subjects {
        if g.is_anomalous() {
            anomalous.push(id.clone());
        } else {
            by_group.entry(*g).or_default().push(id.clone());
        }
    }
    let n_normal: usize = by_group.values().map(Vec::len).sum();
    if k < 2 {
        return Err(Error::config(format!("k must be >= 2, got {k}")));
    }
    if k > n_normal {
        return Err(Error::config(format!("k = {k} exceeds the {n_normal} normal subjects")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed = Vec::with_capacity(n_normal);
    for (gi, members) in by_group.values_mut().enumerate() {
        members.sort();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        for (i, id) in members.iter().enumerate() {
            keyed.push(((i as f64 + 0.5) / n, gi, id.clone()));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<String> = keyed.into_iter().map(|(_, _, id)| id).collect();
    anomalous.sort();

    let base = n_normal / k;
    let extra = n_normal % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let test_normal = &order[start..start + len];
        let train = order[..start].iter().chain(&order[start + len..]).cloned().collect();
        let test = test_normal.iter().chain(&anomalous).cloned().collect();
        folds.push(Fold { train, test });
        start += len;
    }
    Ok(FoldPlan { k, folds })
}
