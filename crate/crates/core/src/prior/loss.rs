use super::model::LatentCode;
use crate::tensor::{GradTape, Var};
use crate::voxel::{ProbGrid, VoxelGrid};
use crate::{Error, Result};

/// Smoothing term of the Soft Dice ratio.
pub const SOFT_DICE_EPS: f64 = 1e-6;

/// Weights of the combined objective
/// `soft_dice + ce_weight * cross_entropy + lambda * |z|²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub ce_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1e-4,
            ce_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.ce_weight >= 0.0) || !self.ce_weight.is_finite() {
            return Err(Error::config(format!("ce_weight {} must be >= 0", self.ce_weight)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub soft_dice: f64,
    pub cross_entropy: f64,
    pub latent_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(soft_dice: f64, cross_entropy: f64, latent_reg: f64, w: LossWeights) -> Self {
        LossBreakdown {
            soft_dice,
            cross_entropy,
            latent_reg,
            total: soft_dice + w.ce_weight * cross_entropy + w.lambda * latent_reg,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Objective evaluated directly on probabilities.
///
/// Cross-entropy terms with zero weight are skipped, so probabilities equal
/// to exactly 0 or 1 never produce `0 * ln(0)`.
pub fn compute_loss(probs: &ProbGrid, target: &VoxelGrid, z: &LatentCode, w: LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    if probs.dims() != target.dims() {
        return Err(Error::contract(format!(
            "loss on dims {:?} vs {:?}",
            probs.dims(),
            target.dims()
        )));
    }
    let (mut inter, mut sum_p, mut sum_y, mut ce) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &occ) in probs.probs().iter().zip(target.occupancy()) {
        let y = if occ { 1.0 } else { 0.0 };
        inter += p * y;
        sum_p += p;
        sum_y += y;
        let pc = p.clamp(f64::MIN_POSITIVE, 1.0);
        let qc = (1.0 - p).clamp(f64::MIN_POSITIVE, 1.0);
        ce -= if occ { pc.ln() } else { qc.ln() };
    }
    let soft_dice = 1.0 - (2.0 * inter + SOFT_DICE_EPS) / (sum_p + sum_y + SOFT_DICE_EPS);
    let cross_entropy = ce / probs.voxel_count() as f64;
    Ok(LossBreakdown::assemble(soft_dice, cross_entropy, z.norm_sq(), w))
}

/// Records the combined objective on `tape` given per-voxel logits.
pub(crate) fn traced_loss(
    tape: &mut GradTape,
    logits: Var,
    target: Var,
    z: Var,
    w: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let sd = tape.soft_dice_with_logits(logits, target, SOFT_DICE_EPS)?;
    let ce = tape.bce_with_logits_mean(logits, target)?;
    let reg = tape.sum_squares(z);
    let ce_w = tape.scale(ce, w.ce_weight);
    let reg_w = tape.scale(reg, w.lambda);
    let total = tape.add(sd, ce_w)?;
    let total = tape.add(total, reg_w)?;
    let breakdown = LossBreakdown::assemble(tape.scalar(sd), tape.scalar(ce), tape.scalar(reg), w);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::Group;

    fn target() -> VoxelGrid {
        VoxelGrid::from_fn([4, 4, 4], [1.0; 3], |i, j, _| i + j < 4)
            .unwrap()
            .with_label("t", Group::SyntheticNormal)
    }

    fn blended(t: &VoxelGrid, alpha: f64) -> ProbGrid {
        let probs = t.as_targets().iter().map(|y| (1.0 - alpha) * y + alpha * 0.5).collect();
        ProbGrid::new(t.dims(), t.spacing(), probs).unwrap()
    }

    #[test]
    fn perfect_fit_is_near_zero() {
        let t = target();
        let l = compute_loss(
            &blended(&t, 0.0),
            &t,
            &LatentCode::zeros(3),
            LossWeights {
                lambda: 0.0,
                ce_weight: 1.0,
            },
        )
        .unwrap();
        assert!(l.soft_dice.abs() < 1e-6);
        assert!(l.cross_entropy.abs() < 1e-12);
        assert_eq!(l.latent_reg, 0.0);
    }

    #[test]
    fn uniform_half_gives_ln2() {
        let t = target();
        let p = ProbGrid::uniform(t.dims(), t.spacing(), 0.5).unwrap();
        let l = compute_loss(
            &p,
            &t,
            &LatentCode::zeros(2),
            LossWeights {
                lambda: 0.0,
                ce_weight: 1.0,
            },
        )
        .unwrap();
        assert!((l.cross_entropy - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_combines_terms() {
        let t = target();
        let z = LatentCode::new(vec![0.5, -1.0]).unwrap();
        let w = LossWeights {
            lambda: 0.1,
            ce_weight: 2.0,
        };
        let l = compute_loss(&blended(&t, 0.3), &t, &z, w).unwrap();
        assert_eq!(l.latent_reg, 1.25);
        assert_eq!(l.total, l.soft_dice + 2.0 * l.cross_entropy + 0.1 * 1.25);
    }

    #[test]
    fn worsens_monotonically_toward_half() {
        let t = target();
        let w = LossWeights {
            lambda: 0.0,
            ce_weight: 1.0,
        };
        let z = LatentCode::zeros(1);
        let mut prev = compute_loss(&blended(&t, 0.0), &t, &z, w).unwrap();
        for step in 1..=10 {
            let cur = compute_loss(&blended(&t, step as f64 / 10.0), &t, &z, w).unwrap();
            assert!(cur.soft_dice > prev.soft_dice);
            assert!(cur.cross_entropy > prev.cross_entropy);
            prev = cur;
        }
    }

    #[test]
    fn dims_mismatch_and_bad_weights() {
        let t = target();
        let p = ProbGrid::uniform([2, 2, 2], [1.0; 3], 0.5).unwrap();
        assert!(compute_loss(&p, &t, &LatentCode::zeros(1), LossWeights::default()).is_err());
        let p = blended(&t, 0.1);
        let bad = LossWeights {
            lambda: -1.0,
            ce_weight: 1.0,
        };
        assert!(compute_loss(&p, &t, &LatentCode::zeros(1), bad).is_err());
    }
}
