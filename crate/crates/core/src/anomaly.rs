//! Anomaly detectors built on a trained prior: thresholding of reconstruction
//! Dice, and a two-dimensional discriminant projection of latent codes.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::prior::LatentCode;
use crate::voxel::Group;
use crate::{Error, Result};

/// Default percentile of held-out normal scores used as the threshold.
pub const DEFAULT_QUANTILE: f64 = 5.0;

/// Default within-class scatter shrinkage, relative to its mean eigenvalue.
pub const DEFAULT_SHRINKAGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Normal,
    Anomalous,
}

/// The `quantile`-th percentile of `normal_scores`, linearly interpolated
/// between order statistics at rank `q/100 * (n - 1)`.
pub fn calibrate_threshold(normal_scores: &[f64], quantile: f64) -> Result<f64> {
    if normal_scores.len() < 2 {
        return Err(Error::contract(format!(
            "threshold calibration needs >= 2 scores, got {}",
            normal_scores.len()
        )));
    }
    if !(quantile > 0.0 && quantile < 100.0) {
        return Err(Error::config(format!("quantile must be in (0, 100), got {quantile}")));
    }
    if normal_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration score".into()));
    }
    let mut sorted = normal_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = quantile / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Anomalous iff `dice < threshold`.
pub fn classify(dice: f64, threshold: f64) -> Verdict {
    if dice < threshold {
        Verdict::Anomalous
    } else {
        Verdict::Normal
    }
}

/// Probability that a random normal score exceeds a random anomalous one,
/// ties counting one half.
pub fn roc_auc(normal_scores: &[f64], anomalous_scores: &[f64]) -> Result<f64> {
    if normal_scores.is_empty() || anomalous_scores.is_empty() {
        return Err(Error::contract("roc_auc needs both score lists nonempty"));
    }
    if normal_scores.iter().chain(anomalous_scores).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc_auc score".into()));
    }
    // Rank-sum over the pooled sample with midranks for ties.
    let mut pooled: Vec<(f64, bool)> = normal_scores
        .iter()
        .map(|&s| (s, true))
        .chain(anomalous_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut normal_rank_sum = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let normals = pooled[i..=j].iter().filter(|p| p.1).count();
        normal_rank_sum += midrank * normals as f64;
        i = j + 1;
    }
    let n = normal_scores.len() as f64;
    let m = anomalous_scores.len() as f64;
    let u = normal_rank_sum - n * (n + 1.0) / 2.0;
    Ok(u / (n * m))
}

/// Fitted discriminant projection of latent codes to the plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaProjection {
    /// Class labels in ascending order; `class_means[i]` belongs to `classes[i]`.
    pub classes: Vec<Group>,
    pub class_means: Vec<Vec<f64>>,
    /// Mean of all fitted samples; projections are taken relative to it.
    pub grand_mean: Vec<f64>,
    /// Row-major `d x d` pooled within-class scatter, before shrinkage.
    pub within_scatter: Vec<f64>,
    pub shrinkage: f64,
    /// Two unit-norm directions of dimension `d`.
    pub basis: [Vec<f64>; 2],
    /// Generalized eigenvalues of the discriminant directions, descending.
    pub discriminant_eigenvalues: Vec<f64>,
    /// True when the second axis is the principal residual direction rather
    /// than a second discriminant.
    pub second_axis_is_residual_pc: bool,
    /// Projected fitted samples, in input order.
    pub points: Vec<[f64; 2]>,
}

impl LdaProjection {
    pub fn dim(&self) -> usize {
        self.grand_mean.len()
    }

    pub fn within_scatter_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.within_scatter)
    }
}

/// [`lda_fit_with`] at the default shrinkage.
pub fn lda_fit(latents: &[LatentCode], labels: &[Group]) -> Result<LdaProjection> {
    lda_fit_with(latents, labels, DEFAULT_SHRINKAGE)
}

/// Fisher discriminant directions from `S_b w = mu (S_w + gamma I) w`, with
/// `gamma = shrinkage * trace(S_w) / d`.
///
/// With two classes there is one discriminant; the second axis is then the
/// leading principal direction of the centered data after removing its
/// component along the first. Axis signs: the first class's mean projects
/// negative on axis one, and the largest-magnitude entry of axis two is
/// positive.
pub fn lda_fit_with(latents: &[LatentCode], labels: &[Group], shrinkage: f64) -> Result<LdaProjection> {
    if latents.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} latents but {} labels",
            latents.len(),
            labels.len()
        )));
    }
    if !(shrinkage > 0.0) || !shrinkage.is_finite() {
        return Err(Error::config(format!("LDA shrinkage must be > 0, got {shrinkage}")));
    }
    let d = latents.first().map_or(0, LatentCode::dim);
    if d < 2 {
        return Err(Error::contract("LDA needs latent dimension >= 2"));
    }
    if latents.iter().any(|z| z.dim() != d) {
        return Err(Error::contract("latents have mixed dimensions"));
    }
    let mut by_class: BTreeMap<Group, Vec<usize>> = BTreeMap::new();
    for (i, &g) in labels.iter().enumerate() {
        by_class.entry(g).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::contract("LDA needs at least 2 classes"));
    }
    if let Some((g, idx)) = by_class.iter().find(|(_, idx)| idx.len() < 2) {
        return Err(Error::contract(format!(
            "class {g} has {} sample(s), need >= 2",
            idx.len()
        )));
    }

    let n = latents.len();
    let x = DMatrix::from_fn(n, d, |i, j| latents[i].as_slice()[j]);
    let grand_mean: DVector<f64> = x.row_mean().transpose();
    let mut s_w = DMatrix::<f64>::zeros(d, d);
    let mut s_b = DMatrix::<f64>::zeros(d, d);
    let mut class_means = Vec::with_capacity(by_class.len());
    for idx in by_class.values() {
        let rows = x.select_rows(idx);
        let mean: DVector<f64> = rows.row_mean().transpose();
        let mut centered = rows;
        for mut r in centered.row_iter_mut() {
            r -= mean.transpose();
        }
        s_w += centered.transpose() * &centered;
        let diff = &mean - &grand_mean;
        s_b += (idx.len() as f64) * &diff * diff.transpose();
        class_means.push(mean);
    }
    // Guards against round-off asymmetry from the accumulation order.
    let s_w = (&s_w + s_w.transpose()) * 0.5;
    let s_b = (&s_b + s_b.transpose()) * 0.5;

    let trace = s_w.trace();
    let gamma = if trace > 0.0 {
        shrinkage * trace / d as f64
    } else {
        shrinkage
    };
    let regularized = &s_w + DMatrix::identity(d, d) * gamma;
    let chol = regularized
        .cholesky()
        .ok_or_else(|| Error::NonFinite("regularized within-class scatter is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NonFinite("singular Cholesky factor".into()))?;
    let whitened = &l_inv * &s_b * l_inv.transpose();
    let whitened = (&whitened + whitened.transpose()) * 0.5;
    let eig = SymmetricEigen::new(whitened);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let n_discriminant = (by_class.len() - 1).min(2);
    let l_inv_t = l_inv.transpose();
    let mut directions = Vec::with_capacity(2);
    let mut eigenvalues = Vec::with_capacity(n_discriminant);
    for &k in order.iter().take(n_discriminant) {
        let w = &l_inv_t * eig.eigenvectors.column(k);
        directions.push(w.normalize());
        eigenvalues.push(eig.eigenvalues[k]);
    }

    let mut centered = x.clone();
    for mut r in centered.row_iter_mut() {
        r -= grand_mean.transpose();
    }
    let second_axis_is_residual_pc = directions.len() == 1;
    if second_axis_is_residual_pc {
        directions.push(residual_principal_axis(&centered, &directions[0]));
    }

    let first_offset = (&class_means[0] - &grand_mean).dot(&directions[0]);
    if first_offset > 0.0 {
        directions[0] = -&directions[0];
    }
    let imax = directions[1].iamax();
    if directions[1][imax] < 0.0 {
        directions[1] = -&directions[1];
    }

    let points = (0..n)
        .map(|i| {
            let r = centered.row(i);
            [r.dot(&directions[0].transpose()), r.dot(&directions[1].transpose())]
        })
        .collect();
    if directions.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("LDA basis".into()));
    }
    let to_vec = |v: &DVector<f64>| v.iter().copied().collect::<Vec<f64>>();
    Ok(LdaProjection {
        classes: by_class.keys().copied().collect(),
        class_means: class_means.iter().map(to_vec).collect(),
        grand_mean: to_vec(&grand_mean),
        within_scatter: s_w.transpose().as_slice().to_vec(),
        shrinkage: gamma,
        basis: [to_vec(&directions[0]), to_vec(&directions[1])],
        discriminant_eigenvalues: eigenvalues,
        second_axis_is_residual_pc,
        points,
    })
}

/// Unit vector orthogonal to `w` of maximal residual variance.
fn residual_principal_axis(centered: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    let d = w.len();
    let along = centered * w;
    let residual = centered - along * w.transpose();
    let cov = residual.transpose() * &residual;
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imax();
    if eig.eigenvalues[k] > 1e-12 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE) && eig.eigenvalues[k] > 0.0 {
        let v = eig.eigenvectors.column(k).into_owned();
        // Re-orthogonalize against w to remove eigen-solver drift.
        return (&v - w * w.dot(&v)).normalize();
    }
    // Degenerate residual: any direction orthogonal to w.
    let k = w.iamin();
    let e = DVector::from_fn(d, |i, _| if i == k { 1.0 } else { 0.0 });
    (&e - w * w.dot(&e)).normalize()
}

/// Coordinates of `z` relative to the fitted grand mean.
pub fn lda_project(p: &LdaProjection, z: &LatentCode) -> Result<[f64; 2]> {
    if z.dim() != p.dim() {
        return Err(Error::contract(format!(
            "latent dimension {} does not match projection dimension {}",
            z.dim(),
            p.dim()
        )));
    }
    let mut out = [0.0; 2];
    for (o, w) in out.iter_mut().zip(&p.basis) {
        *o = z
            .as_slice()
            .iter()
            .zip(&p.grand_mean)
            .zip(w)
            .map(|((zi, mi), wi)| (zi - mi) * wi)
            .sum();
    }
    Ok(out)
}

/// Fraction of `queries` lying inside the convex hull of the fitted points
/// of their own class; `None` without queries. A query whose class was not
/// fitted counts as outside.
pub fn own_class_containment(
    p: &LdaProjection,
    fit_labels: &[Group],
    queries: &[(Group, [f64; 2])],
) -> Result<Option<f64>> {
    if fit_labels.len() != p.points.len() {
        return Err(Error::contract(format!(
            "{} labels for {} fitted points",
            fit_labels.len(),
            p.points.len()
        )));
    }
    if queries.is_empty() {
        return Ok(None);
    }
    let mut members: BTreeMap<Group, Vec<[f64; 2]>> = BTreeMap::new();
    for (g, pt) in fit_labels.iter().zip(&p.points) {
        members.entry(*g).or_default().push(*pt);
    }
    let hulls: BTreeMap<Group, Vec<[f64; 2]>> = members.into_iter().map(|(g, pts)| (g, convex_hull(&pts))).collect();
    let inside = queries
        .iter()
        .filter(|(g, pt)| hulls.get(g).is_some_and(|h| in_convex_hull(h, *pt)))
        .count();
    Ok(Some(inside as f64 / queries.len() as f64))
}

/// Relative shrinkages tried by [`select_shrinkage`].
pub const SHRINKAGE_GRID: [f64; 8] = [1e-6, 1e-4, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageScore {
    pub shrinkage: f64,
    /// Mean over held-out subjects of their own-class hull containment.
    pub containment: f64,
    pub std_error: f64,
    /// Held-out subjects that could be scored.
    pub subjects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageSelection {
    pub shrinkage: f64,
    pub scores: Vec<ShrinkageScore>,
}

/// Picks the relative LDA shrinkage by leave-one-subject-out validation on
/// the fitting set alone.
///
/// Each subject in turn is left out, the projection is fitted on the rest,
/// and the subject scores the fraction of its latents that land inside the
/// hull of its own class. The choice is the largest shrinkage whose mean
/// score is within one standard error of the best mean, so ties go to the
/// more stable projection.
pub fn select_shrinkage(
    latents: &[LatentCode],
    labels: &[Group],
    subjects: &[String],
    grid: &[f64],
) -> Result<ShrinkageSelection> {
    if latents.len() != labels.len() || latents.len() != subjects.len() {
        return Err(Error::contract(format!(
            "{} latents, {} labels and {} subject ids",
            latents.len(),
            labels.len(),
            subjects.len()
        )));
    }
    if grid.is_empty() {
        return Err(Error::config("shrinkage grid is empty"));
    }
    let mut ids: Vec<&String> = subjects.iter().collect();
    ids.sort();
    ids.dedup();

    let mut scores = Vec::with_capacity(grid.len());
    for &shrinkage in grid {
        let mut per_subject = Vec::with_capacity(ids.len());
        for id in &ids {
            let (mut fit_z, mut fit_g, mut held) = (Vec::new(), Vec::new(), Vec::new());
            for ((z, g), s) in latents.iter().zip(labels).zip(subjects) {
                if s == *id {
                    held.push((z, *g));
                } else {
                    fit_z.push(z.clone());
                    fit_g.push(*g);
                }
            }
            // A fold that leaves a class too small to fit is not scored.
            let Ok(p) = lda_fit_with(&fit_z, &fit_g, shrinkage) else {
                continue;
            };
            let queries = held
                .iter()
                .map(|(z, g)| Ok((*g, lda_project(&p, z)?)))
                .collect::<Result<Vec<_>>>()?;
            if let Some(c) = own_class_containment(&p, &fit_g, &queries)? {
                per_subject.push(c);
            }
        }
        if per_subject.is_empty() {
            return Err(Error::contract("no leave-one-subject-out fold could be fitted"));
        }
        let n = per_subject.len() as f64;
        let mean = per_subject.iter().sum::<f64>() / n;
        let var = per_subject.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        scores.push(ShrinkageScore {
            shrinkage,
            containment: mean,
            std_error: (var / n).sqrt(),
            subjects: per_subject.len(),
        });
    }
    let best = scores
        .iter()
        .max_by(|a, b| a.containment.total_cmp(&b.containment))
        .expect("grid is nonempty");
    let floor = best.containment - best.std_error;
    let shrinkage = scores
        .iter()
        .filter(|s| s.containment >= floor)
        .map(|s| s.shrinkage)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ShrinkageSelection { shrinkage, scores })
}

/// Convex hull in counter-clockwise order, collinear points dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Whether `p` lies inside or on a counter-clockwise convex polygon.
pub fn in_convex_hull(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            let [a, b] = [hull[0], hull[1]];
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            let dot = (p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1]);
            let len2 = (b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2);
            cross == 0.0 && (0.0..=len2).contains(&dot)
        }
        n => (0..n).all(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % n];
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
        }),
    }
}

/// Best half-plane classifier found between two planar point sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSeparation {
    /// Unit normal; points with `normal . p > offset` are assigned to the second set.
    pub normal: [f64; 2],
    pub offset: f64,
    pub balanced_accuracy: f64,
}

/// Searches half-planes over `directions` evenly spaced normals and every
/// threshold between consecutive projections, maximizing balanced accuracy.
pub fn best_linear_separation(a: &[[f64; 2]], b: &[[f64; 2]], directions: usize) -> Result<LinearSeparation> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("both point sets must be nonempty"));
    }
    if directions == 0 {
        return Err(Error::config("need at least one search direction"));
    }
    let mut best = LinearSeparation {
        normal: [1.0, 0.0],
        offset: f64::INFINITY,
        balanced_accuracy: 0.5,
    };
    for k in 0..directions {
        let theta = std::f64::consts::TAU * k as f64 / directions as f64;
        let normal = [theta.cos(), theta.sin()];
        let mut proj: Vec<(f64, bool)> = a
            .iter()
            .map(|p| (normal[0] * p[0] + normal[1] * p[1], false))
            .chain(b.iter().map(|p| (normal[0] * p[0] + normal[1] * p[1], true)))
            .collect();
        proj.sort_by(|x, y| x.0.total_cmp(&y.0));
        // Threshold below all points: everything assigned to `b`.
        let (mut a_below, mut b_below) = (0usize, 0usize);
        for i in 0..=proj.len() {
            if i > 0 {
                if proj[i - 1].1 {
                    b_below += 1;
                } else {
                    a_below += 1;
                }
                if i < proj.len() && proj[i].0 == proj[i - 1].0 {
                    continue;
                }
            }
            let acc = 0.5 * (a_below as f64 / a.len() as f64 + (b.len() - b_below) as f64 / b.len() as f64);
            if acc > best.balanced_accuracy {
                let offset = match i {
                    0 => proj[0].0 - 1.0,
                    i if i == proj.len() => proj[i - 1].0 + 1.0,
                    i => 0.5 * (proj[i - 1].0 + proj[i].0),
                };
                best = LinearSeparation {
                    normal,
                    offset,
                    balanced_accuracy: acc,
                };
            }
        }
    }
    Ok(best)
}

/// Inputs for one scored test shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeScore {
    pub subject_id: String,
    pub scan_index: u32,
    pub group: Group,
    pub dice: f64,
    pub volume_cm3: f64,
    pub vol_err_cm3: f64,
    pub vol_err_pct: Option<f64>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredShape {
    #[serde(flatten)]
    pub score: ShapeScore,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub threshold: f64,
    pub quantile: f64,
    pub records: Vec<ScoredShape>,
    pub mean_dice_by_group: BTreeMap<String, f64>,
    pub n_normal_verdicts: usize,
    pub n_anomalous_verdicts: usize,
    /// Reconstruction-Dice AUC of normal vs anomalous test shapes; absent
    /// when either side is empty.
    pub auc: Option<f64>,
    /// AUC of the better-oriented pure volume threshold on the same shapes.
    pub volume_auc: Option<f64>,
}

impl AnomalyReport {
    pub fn new(scores: Vec<ShapeScore>, threshold: f64, quantile: f64) -> Result<Self> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut normal = (Vec::new(), Vec::new());
        let mut anomalous = (Vec::new(), Vec::new());
        for s in &scores {
            if !(0.0..=1.0).contains(&s.dice) {
                return Err(Error::contract(format!(
                    "dice {} of {} outside [0, 1]",
                    s.dice, s.subject_id
                )));
            }
            let e = sums.entry(s.group.to_string()).or_insert((0.0, 0));
            e.0 += s.dice;
            e.1 += 1;
            let side = if s.group.is_anomalous() {
                &mut anomalous
            } else {
                &mut normal
            };
            side.0.push(s.dice);
            side.1.push(s.volume_cm3);
        }
        let (auc, volume_auc) = if normal.0.is_empty() || anomalous.0.is_empty() {
            (None, None)
        } else {
            let v = roc_auc(&normal.1, &anomalous.1)?;
            (Some(roc_auc(&normal.0, &anomalous.0)?), Some(v.max(1.0 - v)))
        };
        let records: Vec<ScoredShape> = scores
            .into_iter()
            .map(|score| ScoredShape {
                verdict: classify(score.dice, threshold),
                score,
            })
            .collect();
        let n_anomalous_verdicts = records.iter().filter(|r| r.verdict == Verdict::Anomalous).count();
        Ok(AnomalyReport {
            threshold,
            quantile,
            n_normal_verdicts: records.len() - n_anomalous_verdicts,
            n_anomalous_verdicts,
            records,
            mean_dice_by_group: sums.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect(),
            auc,
            volume_auc,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn pairwise_auc(n: &[f64], a: &[f64]) -> f64 {
        let mut s = 0.0;
        for x in n {
            for y in a {
                s += if x > y {
                    1.0
                } else if x == y {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (n.len() * a.len()) as f64
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(calibrate_threshold(&[0.95, 0.95, 0.95], 5.0).unwrap(), 0.95);
        assert_eq!(calibrate_threshold(&[0.95, 0.95, 0.95], 73.0).unwrap(), 0.95);
        assert_abs_diff_eq!(calibrate_threshold(&[1.0, 0.9], 50.0).unwrap(), 0.95, epsilon = 1e-15);
        assert!(calibrate_threshold(&[0.9], 5.0).is_err());
        assert!(calibrate_threshold(&[0.9, 0.8], 0.0).is_err());
        assert!(calibrate_threshold(&[0.9, 0.8], 100.0).is_err());
    }

    #[test]
    fn classify_is_strict() {
        assert_eq!(classify(0.99, 0.93), Verdict::Normal);
        assert_eq!(classify(0.80, 0.93), Verdict::Anomalous);
        assert_eq!(classify(0.93, 0.93), Verdict::Normal);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1], &[0.5]).unwrap(), 0.0);
        assert!(roc_auc(&[], &[0.5]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n: Vec<f64> = (0..rng.gen_range(1..20))
                .map(|_| (rng.gen_range(0..10) as f64) / 10.0)
                .collect();
            let a: Vec<f64> = (0..rng.gen_range(1..20))
                .map(|_| (rng.gen_range(0..10) as f64) / 10.0)
                .collect();
            assert_abs_diff_eq!(roc_auc(&n, &a).unwrap(), pairwise_auc(&n, &a), epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(
            n in prop::collection::vec(-5.0f64..5.0, 1..15),
            a in prop::collection::vec(-5.0f64..5.0, 1..15),
        ) {
            let f = |v: &f64| (v * 0.7).exp() + 3.0;
            let tn: Vec<f64> = n.iter().map(f).collect();
            let ta: Vec<f64> = a.iter().map(f).collect();
            prop_assert!((roc_auc(&n, &a).unwrap() - roc_auc(&tn, &ta).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn calibrated_threshold_flags_at_most_q_percent(
            scores in prop::collection::vec(0.0f64..1.0, 2..60),
            q in 1.0f64..99.0,
        ) {
            let tau = calibrate_threshold(&scores, q).unwrap();
            let flagged = scores.iter().filter(|&&s| classify(s, tau) == Verdict::Anomalous).count();
            prop_assert!(flagged as f64 <= q / 100.0 * scores.len() as f64 + 1.0);
            prop_assert!((flagged as f64) / (scores.len() as f64) <= q / 100.0 + 1.0 / (scores.len() - 1) as f64);
        }
    }

    fn gaussian_classes(d: usize, n_per: usize, seed: u64, offset: f64) -> (Vec<LatentCode>, Vec<Group>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut zs = Vec::new();
        let mut labels = Vec::new();
        for (g, sign) in [(Group::Young, -1.0), (Group::OldNonsarcopenic, 1.0)] {
            for _ in 0..n_per {
                let mut v: Vec<f64> = (0..d).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
                v[0] += sign * offset;
                zs.push(LatentCode::new(v).unwrap());
                labels.push(g);
            }
        }
        (zs, labels)
    }

    #[test]
    fn lda_recovers_separating_axis() {
        let (zs, labels) = gaussian_classes(8, 200, 1, 1.0);
        let p = lda_fit(&zs, &labels).unwrap();
        let angle = p.basis[0][0].abs().min(1.0).acos();
        assert!(angle < 0.1, "{angle}");
        assert!(p.second_axis_is_residual_pc);
        for w in &p.basis {
            assert_abs_diff_eq!(w.iter().map(|v| v * v).sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        let dot: f64 = p.basis[0].iter().zip(&p.basis[1]).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-10);
        // First class centroid projects negative.
        let young: Vec<f64> = p
            .points
            .iter()
            .zip(&labels)
            .filter(|(_, &g)| g == Group::Young)
            .map(|(pt, _)| pt[0])
            .collect();
        assert!(young.iter().sum::<f64>() < 0.0);
        // Separated toy classes give disjoint intervals on axis one.
        let old_min = p
            .points
            .iter()
            .zip(&labels)
            .filter(|(_, &g)| g != Group::Young)
            .map(|(pt, _)| pt[0])
            .fold(f64::INFINITY, f64::min);
        assert!(young.iter().cloned().fold(f64::NEG_INFINITY, f64::max) < old_min);
    }

    #[test]
    fn lda_scatter_is_symmetric_psd() {
        let (zs, labels) = gaussian_classes(5, 10, 2, 0.5);
        let p = lda_fit(&zs, &labels).unwrap();
        let s = p.within_scatter_matrix();
        assert_abs_diff_eq!((&s - s.transpose()).amax(), 0.0, epsilon = 1e-12);
        assert!(SymmetricEigen::new(s).eigenvalues.min() > -1e-10);
    }

    #[test]
    fn identical_means_have_null_discriminant() {
        let mut zs = Vec::new();
        let mut labels = Vec::new();
        for (i, v) in [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]]
            .iter()
            .enumerate()
        {
            zs.push(LatentCode::new(v.to_vec()).unwrap());
            labels.push(if i < 2 { Group::Young } else { Group::OldNonsarcopenic });
        }
        let p = lda_fit(&zs, &labels).unwrap();
        assert!(p.discriminant_eigenvalues[0].abs() < 1e-9);
    }

    #[test]
    fn projection_linear_and_origin_convention() {
        let (zs, labels) = gaussian_classes(6, 20, 3, 1.0);
        let p = lda_fit(&zs, &labels).unwrap();
        let origin = lda_project(&p, &LatentCode::zeros(6)).unwrap();
        for (k, o) in origin.iter().enumerate() {
            let expect: f64 = -p.grand_mean.iter().zip(&p.basis[k]).map(|(m, w)| m * w).sum::<f64>();
            assert_abs_diff_eq!(*o, expect, epsilon = 1e-12);
        }
        let (a, b) = (2.0, -0.5);
        let z1 = &zs[0];
        let z2 = &zs[25];
        let mix = LatentCode::new(
            z1.as_slice()
                .iter()
                .zip(z2.as_slice())
                .map(|(x, y)| a * x + b * y)
                .collect(),
        )
        .unwrap();
        let lin = |z: &LatentCode| {
            let q = lda_project(&p, z).unwrap();
            [q[0] - origin[0], q[1] - origin[1]]
        };
        let (l1, l2, lm) = (lin(z1), lin(z2), lin(&mix));
        for k in 0..2 {
            assert_abs_diff_eq!(lm[k], a * l1[k] + b * l2[k], epsilon = 1e-10);
        }
        assert_eq!(lda_project(&p, &zs[4]).unwrap(), p.points[4]);
        assert!(lda_project(&p, &LatentCode::zeros(5)).is_err());
    }

    #[test]
    fn basis_invariant_to_translation() {
        let (zs, labels) = gaussian_classes(6, 15, 4, 1.0);
        let shifted: Vec<LatentCode> = zs
            .iter()
            .map(|z| LatentCode::new(z.as_slice().iter().map(|v| v + 3.5).collect()).unwrap())
            .collect();
        let p = lda_fit(&zs, &labels).unwrap();
        let q = lda_fit(&shifted, &labels).unwrap();
        for k in 0..2 {
            let dot: f64 = p.basis[k].iter().zip(&q.basis[k]).map(|(a, b)| a * b).sum();
            assert_abs_diff_eq!(dot.abs(), 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn lda_input_errors() {
        let (zs, mut labels) = gaussian_classes(4, 3, 5, 1.0);
        assert!(lda_fit(&zs[..2], &labels[..2]).is_err());
        labels[5] = Group::Sarcopenic;
        labels[4] = Group::Young;
        assert!(lda_fit(&zs, &labels).is_err());
        assert!(lda_fit(&zs, &labels[..3]).is_err());
        let one_d = vec![LatentCode::new(vec![1.0]).unwrap(); 4];
        assert!(lda_fit(
            &one_d,
            &[
                Group::Young,
                Group::Young,
                Group::OldNonsarcopenic,
                Group::OldNonsarcopenic
            ]
        )
        .is_err());
    }

    #[test]
    fn three_classes_use_two_discriminants() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut zs = Vec::new();
        let mut labels = Vec::new();
        for (c, g) in [Group::Young, Group::OldNonsarcopenic, Group::SyntheticNormal]
            .into_iter()
            .enumerate()
        {
            for _ in 0..30 {
                let mut v: Vec<f64> = (0..5).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
                v[c] += 2.0;
                zs.push(LatentCode::new(v).unwrap());
                labels.push(g);
            }
        }
        let p = lda_fit(&zs, &labels).unwrap();
        assert!(!p.second_axis_is_residual_pc);
        assert_eq!(p.discriminant_eigenvalues.len(), 2);
        assert!(p.discriminant_eigenvalues[1] > 1.0);
    }

    #[test]
    fn hull_and_membership() {
        let pts = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0], [1.0, 1.0], [1.0, 0.0]];
        let hull = convex_hull(&pts);
        assert_eq!(hull.len(), 4);
        assert!(in_convex_hull(&hull, [1.0, 1.0]));
        assert!(in_convex_hull(&hull, [2.0, 1.0]));
        assert!(!in_convex_hull(&hull, [2.1, 1.0]));
        let seg = convex_hull(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(in_convex_hull(&seg, [0.5, 0.5]));
        assert!(!in_convex_hull(&seg, [0.5, 0.6]));
    }

    #[test]
    fn hull_contains_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let pts: Vec<[f64; 2]> = (0..rng.gen_range(3..40)).map(|_| [rng.gen(), rng.gen()]).collect();
            let hull = convex_hull(&pts);
            assert!(pts.iter().all(|&p| in_convex_hull(&hull, p)));
        }
    }

    #[test]
    fn containment_counts_own_class_only() {
        let (zs, labels) = gaussian_classes(3, 20, 5, 4.0);
        let p = lda_fit(&zs, &labels).unwrap();
        let centroid = |g: Group| {
            let pts: Vec<&[f64; 2]> = p
                .points
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == g)
                .map(|(pt, _)| pt)
                .collect();
            let n = pts.len() as f64;
            [
                pts.iter().map(|q| q[0]).sum::<f64>() / n,
                pts.iter().map(|q| q[1]).sum::<f64>() / n,
            ]
        };
        let (a, b) = (labels[0], *labels.iter().find(|g| **g != labels[0]).unwrap());
        let own = [(a, centroid(a)), (b, centroid(b))];
        let swapped = [(a, centroid(b)), (b, centroid(a))];
        assert_eq!(own_class_containment(&p, &labels, &own).unwrap(), Some(1.0));
        assert_eq!(own_class_containment(&p, &labels, &swapped).unwrap(), Some(0.0));
        assert_eq!(own_class_containment(&p, &labels, &[]).unwrap(), None);
        assert!(own_class_containment(&p, &labels[1..], &own).is_err());
    }

    #[test]
    fn shrinkage_selection_prefers_regularization_when_dimension_exceeds_samples() {
        // 8 subjects x 2 scans in 24 dimensions: the unregularized
        // discriminant collapses each class onto a line.
        let (zs, labels) = gaussian_classes(24, 8, 6, 1.5);
        let subjects: Vec<String> = (0..zs.len()).map(|i| format!("s{}", i / 2)).collect();
        let sel = select_shrinkage(&zs, &labels, &subjects, &SHRINKAGE_GRID).unwrap();
        assert_eq!(sel.scores.len(), SHRINKAGE_GRID.len());
        assert!(SHRINKAGE_GRID.contains(&sel.shrinkage));
        let at = |s: f64| sel.scores.iter().find(|x| x.shrinkage == s).unwrap().containment;
        assert!(at(1e3) > at(1e-6), "{:?}", sel.scores);
        assert!(sel.shrinkage > 1e-6);
        assert_eq!(select_shrinkage(&zs, &labels, &subjects, &SHRINKAGE_GRID).unwrap(), sel);
        assert!(select_shrinkage(&zs, &labels, &subjects[1..], &SHRINKAGE_GRID).is_err());
        assert!(select_shrinkage(&zs, &labels, &subjects, &[]).is_err());
    }

    #[test]
    fn separation_search() {
        let a = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let b = [[3.0, 3.0], [4.0, 3.0], [3.0, 4.0]];
        let s = best_linear_separation(&a, &b, 360).unwrap();
        assert_eq!(s.balanced_accuracy, 1.0);
        for p in &a {
            assert!(s.normal[0] * p[0] + s.normal[1] * p[1] <= s.offset);
        }
        for p in &b {
            assert!(s.normal[0] * p[0] + s.normal[1] * p[1] > s.offset);
        }
        // XOR layout cannot be separated perfectly.
        let xa = [[0.0, 0.0], [1.0, 1.0]];
        let xb = [[0.0, 1.0], [1.0, 0.0]];
        assert!(best_linear_separation(&xa, &xb, 720).unwrap().balanced_accuracy < 1.0);
    }

    #[test]
    fn report_counts_and_auc() {
        let mk = |id: &str, g: Group, dice: f64, vol: f64| ShapeScore {
            subject_id: id.into(),
            scan_index: 0,
            group: g,
            dice,
            volume_cm3: vol,
            vol_err_cm3: 0.0,
            vol_err_pct: Some(0.0),
            final_loss: 0.1,
        };
        let scores = vec![
            mk("a", Group::SyntheticNormal, 0.97, 10.0),
            mk("b", Group::Young, 0.95, 12.0),
            mk("c", Group::SyntheticAnomalous, 0.85, 11.0),
            mk("d", Group::SyntheticAnomalous, 0.96, 9.0),
        ];
        let r = AnomalyReport::new(scores, 0.955, 5.0).unwrap();
        assert_eq!(r.n_normal_verdicts + r.n_anomalous_verdicts, 4);
        assert_eq!(r.n_anomalous_verdicts, 2);
        assert_abs_diff_eq!(r.auc.unwrap(), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(r.volume_auc.unwrap(), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(r.mean_dice_by_group["synthetic_anomalous"], 0.905, epsilon = 1e-12);
    }
}
