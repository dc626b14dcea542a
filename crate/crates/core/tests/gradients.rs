//! Analytic gradients of the full-volume objective against central
//! differences taken along random directions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapeprior::prior::{coords_matrix, loss_and_grads, Architecture, GradRequest, LossWeights, ShapeTarget};
use shapeprior::voxel::VoxelGrid;

const H: f64 = 1e-6;

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn check(arch: Architecture, dims: [usize; 3], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = arch.param_count();
    let params: Vec<f64> = arch
        .layer_shapes()
        .iter()
        .flat_map(|&(i, o)| {
            let s = (2.0 / i as f64).sqrt();
            (0..i * o + o).map(|_| rng.gen_range(-s..s)).collect::<Vec<_>>()
        })
        .collect();
    assert_eq!(params.len(), n);
    let z: Vec<f64> = (0..arch.latent_dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let grid = VoxelGrid::from_fn(dims, [1.0; 3], |_, _, _| rng.gen_bool(0.4)).unwrap();
    let coords = coords_matrix(dims);
    let target = ShapeTarget::new(&grid);
    let w = LossWeights {
        lambda: 0.05,
        ce_weight: 0.7,
    };
    let all = GradRequest {
        theta: true,
        latent: true,
    };
    let none = GradRequest {
        theta: false,
        latent: false,
    };
    let eval = loss_and_grads(&arch, &params, &z, &coords, &target, w, all).unwrap();
    let gt = eval.theta_grad.unwrap();
    let gz = eval.latent_grad.unwrap();
    let loss = |p: &[f64], zz: &[f64]| {
        loss_and_grads(&arch, p, zz, &coords, &target, w, none)
            .unwrap()
            .breakdown
            .total
    };

    for trial in 0..6 {
        let dt = random_unit(&mut rng, n);
        let dz = random_unit(&mut rng, z.len());
        let shift = |sign: f64| {
            let p: Vec<f64> = params.iter().zip(&dt).map(|(a, b)| a + sign * H * b).collect();
            let zz: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + sign * H * b).collect();
            loss(&p, &zz)
        };
        let numeric = (shift(1.0) - shift(-1.0)) / (2.0 * H);
        let analytic: f64 =
            gt.iter().zip(&dt).map(|(a, b)| a * b).sum::<f64>() + gz.iter().zip(&dz).map(|(a, b)| a * b).sum::<f64>();
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        assert!(
            rel < 1e-5,
            "trial {trial}: analytic {analytic} vs numeric {numeric} (rel {rel:e})"
        );
    }
}

#[test]
fn shallow_network_matches_finite_differences() {
    let arch = Architecture {
        latent_dim: 4,
        hidden: 8,
        layers: 2,
        skip_after: None,
    };
    check(arch, [5, 4, 3], 11);
}

#[test]
fn eight_layer_network_with_skip_matches_finite_differences() {
    check(Architecture::eight_layer(5, 7), [4, 4, 4], 12);
}

#[test]
fn skip_after_first_layer_matches_finite_differences() {
    let arch = Architecture {
        latent_dim: 2,
        hidden: 5,
        layers: 3,
        skip_after: Some(1),
    };
    check(arch, [3, 5, 2], 13);
}
