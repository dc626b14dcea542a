use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::loss::{traced_loss, LossBreakdown, LossWeights};
use crate::tensor::{Activation, DenseMatrix, GradTape, Var};
use crate::voxel::{voxel_centers, Dims, NormalizedCoord, ProbGrid, Spacing, VoxelGrid};
use crate::{Error, Result};

/// Coordinates fed through the network per forward pass when predicting.
const PREDICT_CHUNK: usize = 16_384;

/// Shape latent `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("latent code must have dimension >= 1"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("latent component {i} is {}", values[i])));
        }
        Ok(LatentCode(values))
    }

    pub fn zeros(d: usize) -> Self {
        LatentCode(vec![0.0; d.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, v| acc + v * v)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

/// Identity of one training volume: a subject and one of its scans.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShapeKey {
    pub subject_id: String,
    pub scan_index: u32,
}

impl ShapeKey {
    pub fn new(subject_id: impl Into<String>, scan_index: u32) -> Self {
        ShapeKey {
            subject_id: subject_id.into(),
            scan_index,
        }
    }
}

impl fmt::Display for ShapeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.subject_id, self.scan_index)
    }
}

/// Layer layout of the occupancy MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub latent_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    /// 1-based layer whose output gets the coordinates appended.
    pub skip_after: Option<usize>,
}

impl Architecture {
    /// Eight layers with the coordinates re-injected after the fourth.
    pub fn eight_layer(latent_dim: usize, hidden: usize) -> Self {
        Architecture {
            latent_dim,
            hidden,
            layers: 8,
            skip_after: Some(4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::config(format!(
                "latent_dim {} and hidden {} must be >= 1",
                self.latent_dim, self.hidden
            )));
        }
        if self.layers < 2 {
            return Err(Error::config(format!("need at least 2 layers, got {}", self.layers)));
        }
        if let Some(s) = self.skip_after {
            if s == 0 || s >= self.layers {
                return Err(Error::config(format!(
                    "skip_after {s} must name a hidden layer in 1..{}",
                    self.layers - 1
                )));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each layer, in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (1..=self.layers)
            .map(|l| {
                let fan_in = if l == 1 {
                    3 + self.latent_dim
                } else if self.skip_after == Some(l - 1) {
                    self.hidden + 3
                } else {
                    self.hidden
                };
                let fan_out = if l == self.layers { 1 } else { self.hidden };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        (1..=self.layers)
            .map(|l| {
                if l == self.layers {
                    Activation::Sigmoid
                } else {
                    Activation::Relu
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Offsets of each layer's weight block and bias block in the flat
    /// parameter vector (weights row-major `fan_in x fan_out`, then bias).
    fn offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.layer_shapes()
            .into_iter()
            .map(|(i, o)| {
                let w = off;
                let b = off + i * o;
                off = b + o;
                (w, b, i, o)
            })
            .collect()
    }
}

/// Trained or freshly initialized network parameters.
///
/// Parameters are stored in single precision, which is exactly what a
/// checkpoint holds; all arithmetic happens in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapePriorModel {
    arch: Architecture,
    params: Vec<f32>,
}

impl ShapePriorModel {
    /// He-style initialization: hidden weights ~ N(0, 2 / fan_in), output
    /// weights ~ N(0, 1 / fan_in), zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        let n_layers = arch.layers;
        for (l, (fan_in, fan_out)) in arch.layer_shapes().into_iter().enumerate() {
            let gain = if l + 1 == n_layers { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).map_err(|e| Error::config(e.to_string()))?;
            params.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng) as f32));
            params.extend(std::iter::repeat_n(0.0f32, fan_out));
        }
        Ok(ShapePriorModel { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f32>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::contract(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameter".into()));
        }
        Ok(ShapePriorModel { arch, params })
    }

    /// Rounds `f64` working parameters to storage precision.
    pub fn from_f64(arch: Architecture, params: &[f64]) -> Result<Self> {
        Self::from_params(arch, params.iter().map(|&p| p as f32).collect())
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_f64(&self) -> Vec<f64> {
        self.params.iter().map(|&p| p as f64).collect()
    }

    /// Occupancy probability at each coordinate, in input order.
    pub fn predict_occupancy(&self, z: &LatentCode, coords: &[NormalizedCoord]) -> Result<Vec<f64>> {
        if coords.is_empty() {
            return Err(Error::contract("predict_occupancy needs at least one coordinate"));
        }
        let mut flat = Vec::with_capacity(coords.len() * 3);
        for c in coords {
            flat.extend_from_slice(&c.as_array());
        }
        let m = DenseMatrix::from_raw(coords.len(), 3, flat);
        self.predict_matrix(z, &m)
    }

    fn predict_matrix(&self, z: &LatentCode, coords: &DenseMatrix) -> Result<Vec<f64>> {
        check_latent(&self.arch, z.as_slice())?;
        let params = self.params_f64();
        let mut out = Vec::with_capacity(coords.rows());
        let rows = coords.rows();
        let mut start = 0;
        while start < rows {
            let end = (start + PREDICT_CHUNK).min(rows);
            let chunk = DenseMatrix::from_raw(end - start, 3, coords.as_slice()[start * 3..end * 3].to_vec());
            let mut tape = GradTape::new();
            let vars = ParamVars::constants(&mut tape, &self.arch, &params);
            let zv = tape.constant(DenseMatrix::from_raw(1, z.dim(), z.as_slice().to_vec()));
            let xv = tape.constant(chunk);
            let logits = forward_logits(&mut tape, &self.arch, &vars, zv, xv)?;
            let probs = tape.sigmoid(logits);
            out.extend_from_slice(tape.value(probs).as_slice());
            start = end;
        }
        Ok(out)
    }

    /// Evaluates the network at every voxel center of a `dims` grid.
    pub fn reconstruct(&self, z: &LatentCode, dims: Dims, spacing: Spacing) -> Result<ProbGrid> {
        let coords = coords_matrix(dims);
        ProbGrid::new(dims, spacing, self.predict_matrix(z, &coords)?)
    }
}

fn check_latent(arch: &Architecture, z: &[f64]) -> Result<()> {
    if z.len() != arch.latent_dim {
        return Err(Error::contract(format!(
            "latent has dimension {}, model expects {}",
            z.len(),
            arch.latent_dim
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent code".into()));
    }
    Ok(())
}

/// Normalized voxel centers of a grid as an `M x 3` matrix, storage order.
pub fn coords_matrix(dims: Dims) -> DenseMatrix {
    let centers = voxel_centers(dims);
    let mut flat = Vec::with_capacity(centers.len() * 3);
    for c in &centers {
        flat.extend_from_slice(&c.as_array());
    }
    DenseMatrix::from_raw(centers.len(), 3, flat)
}

/// Occupancy targets of one volume as an `M x 1` column.
#[derive(Clone, Debug)]
pub struct ShapeTarget {
    dims: Dims,
    values: DenseMatrix,
}

impl ShapeTarget {
    pub fn new(grid: &VoxelGrid) -> Self {
        ShapeTarget {
            dims: grid.dims(),
            values: DenseMatrix::from_raw(grid.voxel_count(), 1, grid.as_targets()),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
}

struct ParamVars {
    layers: Vec<(Var, Var)>,
}

impl ParamVars {
    fn record(tape: &mut GradTape, arch: &Architecture, params: &[f64], trainable: bool) -> Self {
        let layers = arch
            .offsets()
            .into_iter()
            .map(|(w, b, i, o)| {
                let wm = DenseMatrix::from_raw(i, o, params[w..w + i * o].to_vec());
                let bm = DenseMatrix::from_raw(1, o, params[b..b + o].to_vec());
                if trainable {
                    (tape.leaf(wm), tape.leaf(bm))
                } else {
                    (tape.constant(wm), tape.constant(bm))
                }
            })
            .collect();
        ParamVars { layers }
    }

    fn constants(tape: &mut GradTape, arch: &Architecture, params: &[f64]) -> Self {
        Self::record(tape, arch, params, false)
    }
}

/// Records the network on `tape` and returns the `M x 1` logits.
///
/// The first layer's weight rows split into a coordinate block and a latent
/// block; since `z` is shared by every voxel, its contribution is computed
/// once as a row and broadcast like a bias.
fn forward_logits(tape: &mut GradTape, arch: &Architecture, vars: &ParamVars, z: Var, coords: Var) -> Result<Var> {
    let (w1, b1) = vars.layers[0];
    let w_coord = tape.rows(w1, 0, 3)?;
    let w_latent = tape.rows(w1, 3, 3 + arch.latent_dim)?;
    let latent_row = tape.matmul(z, w_latent)?;
    let bias = tape.add(latent_row, b1)?;
    let mut h = tape.linear(coords, w_coord, bias)?;
    if arch.layers > 1 {
        h = tape.relu(h);
    }
    for (l, &(w, b)) in vars.layers.iter().enumerate().skip(1) {
        let input = if arch.skip_after == Some(l) {
            tape.concat_cols(h, coords)?
        } else {
            h
        };
        h = tape.linear(input, w, b)?;
        if l + 1 < arch.layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Which gradients [`loss_and_grads`] should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub theta: bool,
    pub latent: bool,
}

#[derive(Clone, Debug)]
pub struct LossEval {
    pub breakdown: LossBreakdown,
    /// Flat gradient in the model's parameter order.
    pub theta_grad: Option<Vec<f64>>,
    pub latent_grad: Option<Vec<f64>>,
}

/// Full-volume objective for one shape and its gradients.
///
/// `coords` must be the `M x 3` voxel-center matrix of the target's grid
/// (see [`coords_matrix`]).
pub fn loss_and_grads(
    arch: &Architecture,
    params: &[f64],
    z: &[f64],
    coords: &DenseMatrix,
    target: &ShapeTarget,
    weights: LossWeights,
    request: GradRequest,
) -> Result<LossEval> {
    if params.len() != arch.param_count() {
        return Err(Error::contract(format!(
            "architecture needs {} parameters, got {}",
            arch.param_count(),
            params.len()
        )));
    }
    check_latent(arch, z)?;
    if coords.shape() != (target.values.rows(), 3) {
        return Err(Error::contract(format!(
            "coords {:?} do not match {} target voxels",
            coords.shape(),
            target.values.rows()
        )));
    }
    let mut tape = GradTape::new();
    let vars = ParamVars::record(&mut tape, arch, params, request.theta);
    let z_row = DenseMatrix::from_raw(1, z.len(), z.to_vec());
    let zv = if request.latent {
        tape.leaf(z_row)
    } else {
        tape.constant(z_row)
    };
    let xv = tape.constant(coords.clone());
    let yv = tape.constant(target.values.clone());
    let logits = forward_logits(&mut tape, arch, &vars, zv, xv)?;
    let (total, breakdown) = traced_loss(&mut tape, logits, yv, zv, weights)?;
    if !breakdown.is_finite() {
        return Ok(LossEval {
            breakdown,
            theta_grad: None,
            latent_grad: None,
        });
    }
    if !request.theta && !request.latent {
        return Ok(LossEval {
            breakdown,
            theta_grad: None,
            latent_grad: None,
        });
    }
    let mut grads = tape.backward(total)?;
    let theta_grad = request.theta.then(|| {
        let mut flat = Vec::with_capacity(params.len());
        for &(w, b) in &vars.layers {
            flat.extend_from_slice(grads.take(w).as_slice());
            flat.extend_from_slice(grads.take(b).as_slice());
        }
        flat
    });
    let latent_grad = request.latent.then(|| grads.take(zv).into_vec());
    Ok(LossEval {
        breakdown,
        theta_grad,
        latent_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::{normalize_coords, Group};

    #[test]
    fn eight_layer_shapes() {
        let arch = Architecture::eight_layer(128, 512);
        let shapes = arch.layer_shapes();
        assert_eq!(shapes.len(), 8);
        assert_eq!(shapes[0], (131, 512));
        assert_eq!(shapes[4], (515, 512));
        assert_eq!(shapes[7], (512, 1));
        assert_eq!(arch.activations()[7], Activation::Sigmoid);
        assert!(arch.activations()[..7].iter().all(|&a| a == Activation::Relu));
    }

    #[test]
    fn init_is_deterministic() {
        let arch = Architecture::eight_layer(8, 16);
        let a = ShapePriorModel::init(arch, 5).unwrap();
        let b = ShapePriorModel::init(arch, 5).unwrap();
        let c = ShapePriorModel::init(arch, 6).unwrap();
        let bits = |m: &ShapePriorModel| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn zero_model_predicts_half() {
        let arch = Architecture::eight_layer(4, 8);
        let model = ShapePriorModel::from_params(arch, vec![0.0; arch.param_count()]).unwrap();
        let p = model.reconstruct(&LatentCode::zeros(4), [3, 4, 5], [1.0; 3]).unwrap();
        assert_eq!(p.voxel_count(), 60);
        assert!(p.probs().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn outputs_open_interval_and_permutation_equivariant() {
        let arch = Architecture::eight_layer(4, 8);
        let model = ShapePriorModel::init(arch, 1).unwrap();
        let z = LatentCode::new(vec![0.3, -0.2, 5.0, 0.0]).unwrap();
        let dims = [4, 3, 2];
        let coords: Vec<_> = (0..24)
            .map(|n| normalize_coords(dims, [n % 4, (n / 4) % 3, n / 12]).unwrap())
            .collect();
        let out = model.predict_occupancy(&z, &coords).unwrap();
        assert!(out.iter().all(|&p| p > 0.0 && p < 1.0));
        let mut rev = coords.clone();
        rev.reverse();
        let mut out_rev = model.predict_occupancy(&z, &rev).unwrap();
        out_rev.reverse();
        assert_eq!(out, out_rev);
        assert_eq!(out, model.predict_occupancy(&z, &coords).unwrap());
    }

    #[test]
    fn latent_dimension_is_checked() {
        let arch = Architecture::eight_layer(4, 8);
        let model = ShapePriorModel::init(arch, 1).unwrap();
        let c = [normalize_coords([2, 2, 2], [0, 0, 0]).unwrap()];
        assert!(model.predict_occupancy(&LatentCode::zeros(3), &c).is_err());
        assert!(model.predict_occupancy(&LatentCode::zeros(4), &[]).is_err());
        assert!(LatentCode::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn bad_architectures() {
        assert!(Architecture {
            latent_dim: 0,
            hidden: 4,
            layers: 8,
            skip_after: Some(4)
        }
        .validate()
        .is_err());
        assert!(Architecture {
            latent_dim: 4,
            hidden: 4,
            layers: 8,
            skip_after: Some(8)
        }
        .validate()
        .is_err());
        assert!(Architecture {
            latent_dim: 4,
            hidden: 4,
            layers: 1,
            skip_after: None
        }
        .validate()
        .is_err());
    }

    #[test]
    fn grads_have_parameter_layout() {
        let arch = Architecture {
            latent_dim: 3,
            hidden: 5,
            layers: 3,
            skip_after: Some(1),
        };
        let model = ShapePriorModel::init(arch, 2).unwrap();
        let grid = VoxelGrid::from_fn([3, 3, 3], [1.0; 3], |i, _, _| i == 1)
            .unwrap()
            .with_label("a", Group::SyntheticNormal);
        let eval = loss_and_grads(
            &arch,
            &model.params_f64(),
            &[0.1, 0.2, 0.3],
            &coords_matrix(grid.dims()),
            &ShapeTarget::new(&grid),
            LossWeights::default(),
            GradRequest {
                theta: true,
                latent: true,
            },
        )
        .unwrap();
        assert_eq!(eval.theta_grad.unwrap().len(), arch.param_count());
        assert_eq!(eval.latent_grad.unwrap().len(), 3);
        assert!(eval.breakdown.total > 0.0);
    }
}
