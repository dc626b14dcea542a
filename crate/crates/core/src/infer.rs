//! Encoding unseen volumes: the network stays frozen and only a fresh latent
//! is optimized against the observed occupancy.

use serde::{Deserialize, Serialize};

use crate::prior::{coords_matrix, loss_and_grads, GradRequest, LatentCode, LossWeights, ShapePriorModel, ShapeTarget};
use crate::tensor::{AdamConfig, AdamState};
use crate::train::init_latents;
use crate::voxel::{binarize, dice_score, vol_err, ProbGrid, VolumeError, VoxelGrid};
use crate::{seed, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub epochs: usize,
    pub lr_latent: f64,
    pub lambda: f64,
    pub ce_weight: f64,
    pub init_std: f64,
    #[serde(skip)]
    pub seed: u64,
    /// Independent random initializations; the lowest final loss wins.
    pub restarts: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            epochs: 1500,
            lr_latent: 1e-3,
            lambda: 1e-4,
            ce_weight: 1.0,
            init_std: 0.1,
            seed: 0,
            restarts: 1,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.restarts == 0 {
            return Err(Error::config("inference epochs and restarts must be >= 1"));
        }
        if !(self.lr_latent > 0.0) || !self.lr_latent.is_finite() {
            return Err(Error::config(format!("lr_latent must be > 0, got {}", self.lr_latent)));
        }
        if !(self.init_std >= 0.0) || !self.init_std.is_finite() {
            return Err(Error::config(format!("init_std must be >= 0, got {}", self.init_std)));
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            ce_weight: self.ce_weight,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferResult {
    pub z: LatentCode,
    pub recon: ProbGrid,
    /// Dice of the 0.5-thresholded reconstruction against the input.
    pub dice_vs_input: f64,
    pub vol_err: VolumeError,
    /// Total loss before each update of the winning restart.
    pub history: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub restart: usize,
}

struct RestartOutcome {
    z: Vec<f64>,
    history: Vec<f64>,
    initial_loss: f64,
    final_loss: f64,
}

/// Optimizes a latent for `shape` with the model weights held fixed.
pub fn infer_latent(model: &ShapePriorModel, shape: &VoxelGrid, cfg: &InferConfig) -> Result<InferResult> {
    cfg.validate()?;
    if shape.is_empty_shape() {
        return Err(Error::contract(format!("shape '{}' is empty", shape.subject_id)));
    }
    let arch = model.architecture();
    let params = model.params_f64();
    let coords = coords_matrix(shape.dims());
    let target = ShapeTarget::new(shape);
    let weights = cfg.weights();

    let run = |restart: usize| -> Result<RestartOutcome> {
        let mut z = init_latents(1, arch.latent_dim, cfg.init_std, seed::derive(cfg.seed, restart as u64))?
            .remove(0)
            .as_slice()
            .to_vec();
        let mut opt = AdamState::new(z.len(), AdamConfig::default())?;
        let mut history = Vec::with_capacity(cfg.epochs);
        let request = GradRequest {
            theta: false,
            latent: true,
        };
        for epoch in 0..cfg.epochs {
            let eval = loss_and_grads(&arch, &params, &z, &coords, &target, weights, request)?;
            if !eval.breakdown.is_finite() {
                return Err(Error::Diverged(format!(
                    "restart {restart}, epoch {epoch}: non-finite loss"
                )));
            }
            history.push(eval.breakdown.total);
            let g = eval.latent_grad.expect("latent gradient was requested");
            opt.step(&mut z, &g, cfg.lr_latent)?;
        }
        let last = loss_and_grads(
            &arch,
            &params,
            &z,
            &coords,
            &target,
            weights,
            GradRequest {
                theta: false,
                latent: false,
            },
        )?;
        if !last.breakdown.is_finite() {
            return Err(Error::Diverged(format!("restart {restart}: non-finite final loss")));
        }
        Ok(RestartOutcome {
            z,
            initial_loss: history[0],
            history,
            final_loss: last.breakdown.total,
        })
    };

    let mut best: Option<(usize, RestartOutcome)> = None;
    let mut failures = Vec::new();
    for restart in 0..cfg.restarts {
        match run(restart) {
            Ok(out) => {
                if best.as_ref().is_none_or(|(_, b)| out.final_loss < b.final_loss) {
                    best = Some((restart, out));
                }
            }
            Err(e @ (Error::Diverged(_) | Error::NonFinite(_))) => failures.push(e.to_string()),
            Err(e) => return Err(e),
        }
    }
    let (restart, out) =
        best.ok_or_else(|| Error::Diverged(format!("all {} restarts failed: {}", cfg.restarts, failures.join("; "))))?;

    let z = LatentCode::new(out.z)?;
    let recon = model.reconstruct(&z, shape.dims(), shape.spacing())?;
    let predicted = binarize(&recon, 0.5)?;
    Ok(InferResult {
        dice_vs_input: dice_score(&predicted, shape)?,
        vol_err: vol_err(shape, &predicted),
        z,
        recon,
        history: out.history,
        initial_loss: out.initial_loss,
        final_loss: out.final_loss,
        restart,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::ShapeKey;
    use crate::train::{train, TrainConfig, TrainingShape};
    use crate::voxel::Group;

    fn blob(n: usize, r: f64, shift: f64) -> VoxelGrid {
        let c = (n as f64 - 1.0) / 2.0;
        VoxelGrid::from_fn([n; 3], [1.0; 3], |i, j, k| {
            let d2 = (i as f64 - c - shift).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2);
            d2 <= r * r
        })
        .unwrap()
        .with_label("b", Group::SyntheticNormal)
    }

    fn model() -> ShapePriorModel {
        let shapes = vec![
            TrainingShape {
                key: ShapeKey::new("a", 0),
                grid: blob(10, 3.0, -1.0),
            },
            TrainingShape {
                key: ShapeKey::new("b", 0),
                grid: blob(10, 3.0, 1.0),
            },
        ];
        let cfg = TrainConfig {
            epochs: 20,
            latent_dim: 4,
            hidden: 16,
            lr_theta: 1e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        train(&shapes, &cfg).unwrap().model
    }

    #[test]
    fn weights_are_frozen_and_loss_decreases() {
        let m = model();
        let before = m.params().to_vec();
        let cfg = InferConfig {
            epochs: 30,
            restarts: 2,
            ..InferConfig::default()
        };
        let res = infer_latent(&m, &blob(10, 3.0, 0.0), &cfg).unwrap();
        assert_eq!(m.params(), &before[..]);
        assert!(res.final_loss <= res.initial_loss);
        assert!((0.0..=1.0).contains(&res.dice_vs_input));
        assert_eq!(res.recon.dims(), [10, 10, 10]);
        assert_eq!(res.history.len(), 30);
    }

    #[test]
    fn deterministic() {
        let m = model();
        let cfg = InferConfig {
            epochs: 10,
            ..InferConfig::default()
        };
        let a = infer_latent(&m, &blob(10, 3.0, 0.5), &cfg).unwrap();
        let b = infer_latent(&m, &blob(10, 3.0, 0.5), &cfg).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn rejects_bad_input() {
        let m = model();
        let empty = VoxelGrid::empty([10, 10, 10], [1.0; 3]).unwrap();
        assert!(infer_latent(&m, &empty, &InferConfig::default()).is_err());
        let cfg = InferConfig {
            restarts: 0,
            ..InferConfig::default()
        };
        assert!(infer_latent(&m, &blob(10, 3.0, 0.0), &cfg).is_err());
    }
}
