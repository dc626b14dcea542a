//! Auto-decoder training: the network weights and one latent per training
//! volume are optimized jointly, one full volume per step.

use std::collections::BTreeMap;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::prior::{
    coords_matrix, loss_and_grads, Architecture, GradRequest, LatentCode, LatentEntry, LossBreakdown, LossWeights,
    ShapeKey, ShapePriorModel, ShapeTarget,
};
use crate::tensor::{AdamConfig, AdamState, DenseMatrix};
use crate::voxel::{binarize, dice_score, Dims, VoxelGrid};
use crate::{seed, Error, Result};

/// Final epoch loss may exceed the best epoch loss by at most this factor.
pub const DIVERGENCE_FACTOR: f64 = 1.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_theta: f64,
    pub lr_latent: f64,
    pub lambda: f64,
    pub latent_init_std: f64,
    pub latent_dim: usize,
    pub hidden: usize,
    pub ce_weight: f64,
    #[serde(skip)]
    pub seed: u64,
    /// Visit the training volumes in a fresh random order each epoch.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2500,
            lr_theta: 1e-4,
            lr_latent: 1e-3,
            lambda: 1e-4,
            latent_init_std: 0.1,
            latent_dim: 128,
            hidden: 512,
            ce_weight: 1.0,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        for (name, v) in [("lr_theta", self.lr_theta), ("lr_latent", self.lr_latent)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.latent_init_std >= 0.0) || !self.latent_init_std.is_finite() {
            return Err(Error::config(format!(
                "latent_init_std must be >= 0, got {}",
                self.latent_init_std
            )));
        }
        self.weights().validate()?;
        self.architecture().validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::eight_layer(self.latent_dim, self.hidden)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            ce_weight: self.ce_weight,
        }
    }
}

/// One training volume with its identity.
#[derive(Clone, Debug)]
pub struct TrainingShape {
    pub key: ShapeKey,
    pub grid: VoxelGrid,
}

/// Mean loss terms over the volumes of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainedPrior {
    pub model: ShapePriorModel,
    /// One latent per training volume, in input order.
    pub latents: Vec<LatentEntry>,
    pub history: Vec<EpochStats>,
}

impl TrainedPrior {
    pub fn latent(&self, key: &ShapeKey) -> Option<&LatentCode> {
        self.latents.iter().find(|e| &e.key == key).map(|e| &e.z)
    }
}

/// `n` latents with i.i.d. N(0, std²) components.
pub fn init_latents(n: usize, d: usize, std: f64, seed: u64) -> Result<Vec<LatentCode>> {
    if n == 0 {
        return Err(Error::contract("need at least one latent"));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::config(format!("latent std {std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| LatentCode::new((0..d).map(|_| normal.sample(&mut rng)).collect()))
        .collect()
}

pub fn train(shapes: &[TrainingShape], cfg: &TrainConfig) -> Result<TrainedPrior> {
    train_with_progress(shapes, cfg, |_, _| ControlFlow::Continue(()))
}

/// Read-only view of the optimization state at the end of an epoch.
pub struct Snapshot<'a> {
    arch: Architecture,
    params: &'a [f64],
    latents: &'a [Vec<f64>],
}

impl Snapshot<'_> {
    /// Current parameters, rounded to storage precision.
    pub fn model(&self) -> Result<ShapePriorModel> {
        ShapePriorModel::from_f64(self.arch, self.params)
    }

    /// Current latent of the `i`-th training shape.
    pub fn latent(&self, i: usize) -> Result<LatentCode> {
        let z = self
            .latents
            .get(i)
            .ok_or_else(|| Error::contract(format!("no training shape {i}")))?;
        LatentCode::new(z.clone())
    }
}

/// Trains and calls `on_epoch` after every epoch; returning
/// `ControlFlow::Break` ends training after that epoch.
pub fn train_with_progress(
    shapes: &[TrainingShape],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &Snapshot<'_>) -> ControlFlow<()>,
) -> Result<TrainedPrior> {
    cfg.validate()?;
    if shapes.is_empty() {
        return Err(Error::contract("training needs at least one shape"));
    }
    for s in shapes {
        if s.grid.is_empty_shape() {
            return Err(Error::contract(format!("training shape {} is empty", s.key)));
        }
    }
    let arch = cfg.architecture();
    let weights = cfg.weights();
    let mut params = ShapePriorModel::init(arch, seed::derive(cfg.seed, 1))?.params_f64();
    let mut latents: Vec<Vec<f64>> = init_latents(
        shapes.len(),
        cfg.latent_dim,
        cfg.latent_init_std,
        seed::derive(cfg.seed, 2),
    )?
    .into_iter()
    .map(|z| z.as_slice().to_vec())
    .collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, 3));

    let mut coords: BTreeMap<Dims, DenseMatrix> = BTreeMap::new();
    for s in shapes {
        coords
            .entry(s.grid.dims())
            .or_insert_with(|| coords_matrix(s.grid.dims()));
    }
    let targets: Vec<ShapeTarget> = shapes.iter().map(|s| ShapeTarget::new(&s.grid)).collect();

    let adam = AdamConfig::default();
    let mut theta_opt = AdamState::new(params.len(), adam)?;
    let mut latent_opts = (0..shapes.len())
        .map(|_| AdamState::new(cfg.latent_dim, adam))
        .collect::<Result<Vec<_>>>()?;

    let both = GradRequest {
        theta: true,
        latent: true,
    };
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut order_rng);
        }
        let mut sum = LossBreakdown::default();
        for &i in &order {
            let eval = loss_and_grads(
                &arch,
                &params,
                &latents[i],
                &coords[&targets[i].dims()],
                &targets[i],
                weights,
                both,
            )?;
            let b = eval.breakdown;
            if !b.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {:?} at epoch {epoch}, shape {}",
                    b, shapes[i].key
                )));
            }
            let (Some(g_theta), Some(g_z)) = (eval.theta_grad, eval.latent_grad) else {
                unreachable!("both gradients were requested");
            };
            theta_opt
                .step(&mut params, &g_theta, cfg.lr_theta)
                .map_err(|e| Error::Diverged(format!("epoch {epoch}, shape {}: {e}", shapes[i].key)))?;
            latent_opts[i]
                .step(&mut latents[i], &g_z, cfg.lr_latent)
                .map_err(|e| Error::Diverged(format!("epoch {epoch}, shape {}: {e}", shapes[i].key)))?;
            sum.soft_dice += b.soft_dice;
            sum.cross_entropy += b.cross_entropy;
            sum.latent_reg += b.latent_reg;
            sum.total += b.total;
        }
        let n = shapes.len() as f64;
        let stats = EpochStats {
            epoch,
            mean: LossBreakdown {
                soft_dice: sum.soft_dice / n,
                cross_entropy: sum.cross_entropy / n,
                latent_reg: sum.latent_reg / n,
                total: sum.total / n,
            },
        };
        let snapshot = Snapshot {
            arch,
            params: &params,
            latents: &latents,
        };
        let flow = on_epoch(&stats, &snapshot);
        history.push(stats);
        if flow.is_break() {
            break;
        }
    }

    let best = history.iter().map(|s| s.mean.total).fold(f64::INFINITY, f64::min);
    let last = history.last().map_or(best, |s| s.mean.total);
    if last > DIVERGENCE_FACTOR * best {
        return Err(Error::Diverged(format!(
            "final epoch loss {last} exceeds {DIVERGENCE_FACTOR} x best epoch loss {best}"
        )));
    }

    let model = ShapePriorModel::from_f64(arch, &params)?;
    let latents = shapes
        .iter()
        .zip(latents)
        .map(|(s, z)| {
            Ok(LatentEntry {
                key: s.key.clone(),
                group: s.grid.group,
                z: LatentCode::new(z)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedPrior {
        model,
        latents,
        history,
    })
}

/// Dice between a volume and the model's reconstruction of it from `z`,
/// thresholded at 0.5.
pub fn reconstruction_dice(model: &ShapePriorModel, z: &LatentCode, grid: &VoxelGrid) -> Result<f64> {
    let recon = model.reconstruct(z, grid.dims(), grid.spacing())?;
    dice_score(&binarize(&recon, 0.5)?, grid)
}
