//! Train a small prior, round-trip it through storage, and infer latents
//! against it.

use std::io::Cursor;

use shapeprior::infer::{infer_latent, InferConfig};
use shapeprior::prior::{
    read_checkpoint, read_latent_table, write_checkpoint, write_latent_table, CheckpointMeta, ShapeKey,
};
use shapeprior::train::{reconstruction_dice, train, TrainConfig, TrainingShape};
use shapeprior::voxel::{Group, VoxelGrid};

const DIMS: [usize; 3] = [12, 12, 12];

fn ellipsoid(rx: f64, ry: f64, rz: f64) -> VoxelGrid {
    let c = |i: usize| (i as f64 + 0.5) / 12.0 * 2.0 - 1.0;
    VoxelGrid::from_fn(DIMS, [2.0; 3], |i, j, k| {
        (c(i) / rx).powi(2) + (c(j) / ry).powi(2) + (c(k) / rz).powi(2) <= 1.0
    })
    .unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 150,
        lr_theta: 3e-3,
        lr_latent: 1e-2,
        latent_dim: 8,
        hidden: 16,
        seed,
        ..TrainConfig::default()
    }
}

fn shapes() -> Vec<TrainingShape> {
    [(0.7, 0.5, 0.6), (0.5, 0.7, 0.4)]
        .iter()
        .enumerate()
        .map(|(i, &(a, b, c))| TrainingShape {
            key: ShapeKey::new(format!("s{i}"), 0),
            grid: ellipsoid(a, b, c).with_label(format!("s{i}"), Group::SyntheticNormal),
        })
        .collect()
}

#[test]
fn training_fits_and_is_reproducible() {
    let data = shapes();
    let a = train(&data, &small_config(3)).unwrap();
    let b = train(&data, &small_config(3)).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.history.len(), 150);
    let first = a.history[0].mean.total;
    let last = a.history.last().unwrap().mean.total;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    for s in &data {
        let dice = reconstruction_dice(&a.model, a.latent(&s.key).unwrap(), &s.grid).unwrap();
        assert!(dice > 0.8, "{} reconstructs at dice {dice}", s.key.subject_id);
    }
}

#[test]
fn storage_round_trip_preserves_predictions() {
    let data = shapes();
    let prior = train(
        &data,
        &TrainConfig {
            epochs: 5,
            ..small_config(4)
        },
    )
    .unwrap();
    let meta = CheckpointMeta {
        ce_weight: 1.0,
        lambda: 1e-4,
        seed: 4,
    };
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &prior.model, &meta).unwrap();
    let (model, meta2) = read_checkpoint(&mut Cursor::new(&buf)).unwrap();
    assert_eq!(meta2, meta);
    assert_eq!(model.params(), prior.model.params());

    let mut table = Vec::new();
    write_latent_table(&mut table, &prior.latents).unwrap();
    let entries = read_latent_table(&mut Cursor::new(&table)).unwrap();
    assert_eq!(entries, prior.latents);

    let z = &entries[0].z;
    let p1 = prior.model.reconstruct(z, DIMS, [2.0; 3]).unwrap();
    let p2 = model.reconstruct(z, DIMS, [2.0; 3]).unwrap();
    assert_eq!(p1.probs(), p2.probs());
}

#[test]
fn inference_recovers_training_shapes_and_is_seeded() {
    let data = shapes();
    let prior = train(&data, &small_config(5)).unwrap();
    let before = prior.model.params().to_vec();
    let cfg = InferConfig {
        epochs: 150,
        lr_latent: 1e-2,
        seed: 9,
        ..InferConfig::default()
    };
    let r1 = infer_latent(&prior.model, &data[0].grid, &cfg).unwrap();
    let r2 = infer_latent(&prior.model, &data[0].grid, &cfg).unwrap();
    assert_eq!(prior.model.params(), &before[..]);
    assert_eq!(r1.z, r2.z);
    assert_eq!(r1.history.len(), 150);
    assert!(r1.final_loss < r1.initial_loss);
    let trained = reconstruction_dice(&prior.model, prior.latent(&data[0].key).unwrap(), &data[0].grid).unwrap();
    assert!(
        r1.dice_vs_input > trained - 0.1,
        "inferred {} vs trained {trained}",
        r1.dice_vs_input
    );
}

#[test]
fn more_restarts_never_increase_final_loss() {
    let data = shapes();
    let prior = train(
        &data,
        &TrainConfig {
            epochs: 40,
            ..small_config(6)
        },
    )
    .unwrap();
    let one = InferConfig {
        epochs: 20,
        lr_latent: 1e-2,
        seed: 2,
        restarts: 1,
        ..InferConfig::default()
    };
    let three = InferConfig {
        restarts: 3,
        ..one.clone()
    };
    let a = infer_latent(&prior.model, &data[1].grid, &one).unwrap();
    let b = infer_latent(&prior.model, &data[1].grid, &three).unwrap();
    assert!(b.final_loss <= a.final_loss);
}
