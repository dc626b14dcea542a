//! Reverse-mode differentiation over a linear record of matrix operations.

use super::matrix::{gemm, relu, scratch, scratch_zeroed, sigmoid, softplus, DenseMatrix, Operand};
use crate::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    /// `x * w + b` with `b` a 1 x n row broadcast over the rows.
    Linear(Var, Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Var, Var),
    RowSlice(Var, usize),
    SumSquares(Var),
    SoftDice {
        logits: Var,
        target: Var,
        eps: f64,
    },
    BceMean {
        logits: Var,
        target: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::ConcatCols(a, b) => {
                vec![a, b]
            }
            Op::Linear(x, w, b) => vec![x, w, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Sigmoid(a) | Op::RowSlice(a, _) => vec![a],
            Op::SumSquares(a) => vec![a],
            Op::SoftDice { logits, target, .. } | Op::BceMean { logits, target } => {
                vec![logits, target]
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations so that [`GradTape::backward`] can replay
/// them in reverse.
///
/// Leaves created with [`GradTape::leaf`] receive gradients; values created
/// with [`GradTape::constant`] do not, and no work is spent on branches that
/// only depend on constants.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient for `var`; leaves the loss does not depend on get zeros.
    pub fn wrt(&self, var: Var) -> DenseMatrix {
        match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> DenseMatrix {
        match self.grads.get_mut(var.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1 x 1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: DenseMatrix, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b)))
    }

    /// Fused `x * w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(x);
        let (k2, n) = self.shape(w);
        if k != k2 || self.shape(b) != (1, n) {
            return Err(Error::contract(format!(
                "linear: x {m}x{k}, w {k2}x{n}, b {:?}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).as_slice();
        let mut out = scratch(m * n);
        for row in out.chunks_exact_mut(n.max(1)) {
            row.copy_from_slice(bias);
        }
        gemm(
            Operand::plain(self.value(x)),
            Operand::plain(self.value(w)),
            &mut out,
            true,
        );
        Ok(self.push_op(DenseMatrix::from_raw(m, n, out), Op::Linear(x, w, b)))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(bias) != (1, n) {
            return Err(Error::contract(format!(
                "add_bias: {m}x{n} with bias {:?}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).as_slice();
        let mut out = scratch(m * n);
        out.copy_from_slice(self.value(a).as_slice());
        for row in out.chunks_exact_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push_op(DenseMatrix::from_raw(m, n, out), Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (m, n) = self.shape(a);
        let out = self
            .value(a)
            .as_slice()
            .iter()
            .zip(self.value(b).as_slice())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push_op(DenseMatrix::from_raw(m, n, out), Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push_op(out, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(relu);
        self.push_op(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a))
    }

    /// `[a | b]`, column-wise.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.shape(a);
        let (mb, nb) = self.shape(b);
        if m != mb {
            return Err(Error::contract(format!("concat_cols: {m} rows vs {mb} rows")));
        }
        let (av, bv) = (self.value(a).as_slice(), self.value(b).as_slice());
        let mut out = scratch(m * (na + nb));
        for (r, row) in out.chunks_exact_mut(na + nb).enumerate() {
            row[..na].copy_from_slice(&av[r * na..(r + 1) * na]);
            row[na..].copy_from_slice(&bv[r * nb..(r + 1) * nb]);
        }
        Ok(self.push_op(DenseMatrix::from_raw(m, na + nb, out), Op::ConcatCols(a, b)))
    }

    /// Rows `start..end` of `a`.
    pub fn rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start > end || end > m {
            return Err(Error::contract(format!("rows {start}..{end} of a {m}-row matrix")));
        }
        let out = self.value(a).as_slice()[start * n..end * n].to_vec();
        Ok(self.push_op(DenseMatrix::from_raw(end - start, n, out), Op::RowSlice(a, start)))
    }

    /// Sum of squared entries, as a 1 x 1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().fold(0.0, |acc, v| acc + v * v);
        self.push_op(DenseMatrix::from_raw(1, 1, vec![s]), Op::SumSquares(a))
    }

    /// Soft Dice loss `1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)` with
    /// `p = sigmoid(logits)`.
    pub fn soft_dice_with_logits(&mut self, logits: Var, target: Var, eps: f64) -> Result<Var> {
        self.check_pair("soft_dice", logits, target)?;
        let (inter, sum_p, sum_y) = dice_sums(self.value(logits), self.value(target));
        let loss = 1.0 - (2.0 * inter + eps) / (sum_p + sum_y + eps);
        Ok(self.push_op(
            DenseMatrix::from_raw(1, 1, vec![loss]),
            Op::SoftDice { logits, target, eps },
        ))
    }

    /// Mean binary cross-entropy evaluated from logits.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.check_pair("bce", logits, target)?;
        let l = self.value(logits).as_slice();
        let y = self.value(target).as_slice();
        let sum = l.iter().zip(y).fold(0.0, |acc, (&l, &y)| acc + softplus(l) - l * y);
        let mean = sum / l.len() as f64;
        Ok(self.push_op(DenseMatrix::from_raw(1, 1, vec![mean]), Op::BceMean { logits, target }))
    }

    fn check_pair(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) || self.value(a).is_empty() {
            return Err(Error::contract(format!(
                "{what}: logits {:?} vs target {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<DenseMatrix>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            adj[loss.0] = Some(DenseMatrix::from_raw(1, 1, vec![1.0]));
        }
        let mut leaf_grads: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            let Some(g) = adj[idx].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf => leaf_grads[idx] = Some(g),
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let (m, k) = self.shape(a);
                        let mut da = scratch(m * k);
                        gemm(Operand::plain(&g), Operand::transposed(self.value(b)), &mut da, false);
                        accumulate(&mut adj, a, DenseMatrix::from_raw(m, k, da));
                    }
                    if self.nodes[b.0].needs_grad {
                        let (k, n2) = self.shape(b);
                        let mut db = scratch(k * n2);
                        gemm(Operand::transposed(self.value(a)), Operand::plain(&g), &mut db, false);
                        accumulate(&mut adj, b, DenseMatrix::from_raw(k, n2, db));
                    }
                }
                Op::Linear(x, w, b) => {
                    if self.nodes[x.0].needs_grad {
                        let (m, k) = self.shape(x);
                        let mut dx = scratch(m * k);
                        gemm(Operand::plain(&g), Operand::transposed(self.value(w)), &mut dx, false);
                        accumulate(&mut adj, x, DenseMatrix::from_raw(m, k, dx));
                    }
                    if self.nodes[w.0].needs_grad {
                        let (k, n2) = self.shape(w);
                        let mut dw = scratch(k * n2);
                        gemm(Operand::transposed(self.value(x)), Operand::plain(&g), &mut dw, false);
                        accumulate(&mut adj, w, DenseMatrix::from_raw(k, n2, dw));
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, b, column_sums(&g));
                    }
                }
                Op::AddBias(a, b) => {
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, b, column_sums(&g));
                    }
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut adj, b, g.clone());
                    }
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Scale(a, f) => accumulate(&mut adj, a, g.map(|v| v * f)),
                Op::Relu(a) => {
                    let mut d = g;
                    for (dv, &out) in d.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        if out <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut adj, a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    for (dv, &s) in d.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *dv *= s * (1.0 - s);
                    }
                    accumulate(&mut adj, a, d);
                }
                Op::ConcatCols(a, b) => {
                    let (m, na) = self.shape(a);
                    let nb = self.shape(b).1;
                    let gs = g.as_slice();
                    if self.nodes[a.0].needs_grad {
                        let mut da = scratch(m * na);
                        for (r, row) in da.chunks_exact_mut(na.max(1)).enumerate() {
                            row.copy_from_slice(&gs[r * (na + nb)..r * (na + nb) + na]);
                        }
                        accumulate(&mut adj, a, DenseMatrix::from_raw(m, na, da));
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = scratch(m * nb);
                        for (r, row) in db.chunks_exact_mut(nb.max(1)).enumerate() {
                            row.copy_from_slice(&gs[r * (na + nb) + na..(r + 1) * (na + nb)]);
                        }
                        accumulate(&mut adj, b, DenseMatrix::from_raw(m, nb, db));
                    }
                }
                Op::RowSlice(a, start) => {
                    let (m, n2) = self.shape(a);
                    let mut full = DenseMatrix::from_raw(m, n2, scratch_zeroed(m * n2));
                    full.as_mut_slice()[start * n2..start * n2 + g.len()].copy_from_slice(g.as_slice());
                    accumulate(&mut adj, a, full);
                }
                Op::SumSquares(a) => {
                    let s = g.as_slice()[0];
                    accumulate(&mut adj, a, self.value(a).map(|v| 2.0 * v * s));
                }
                Op::SoftDice { logits, target, eps } => {
                    let upstream = g.as_slice()[0];
                    let l = self.value(logits);
                    let y = self.value(target).as_slice();
                    let (inter, sum_p, sum_y) = dice_sums(l, self.value(target));
                    let denom = sum_p + sum_y + eps;
                    let numer = 2.0 * inter + eps;
                    let mut d = scratch(l.len());
                    for ((o, &li), &yi) in d.iter_mut().zip(l.as_slice()).zip(y) {
                        let p = sigmoid(li);
                        // d(loss)/dp = -(2y / denom - numer / denom^2)
                        let dp = numer / (denom * denom) - 2.0 * yi / denom;
                        *o = upstream * dp * p * (1.0 - p);
                    }
                    accumulate(&mut adj, logits, DenseMatrix::from_raw(l.rows(), l.cols(), d));
                }
                Op::BceMean { logits, target } => {
                    let upstream = g.as_slice()[0];
                    let l = self.value(logits);
                    let y = self.value(target).as_slice();
                    let inv_n = 1.0 / l.len() as f64;
                    let mut d = scratch(l.len());
                    for ((o, &li), &yi) in d.iter_mut().zip(l.as_slice()).zip(y) {
                        *o = upstream * inv_n * (sigmoid(li) - yi);
                    }
                    accumulate(&mut adj, logits, DenseMatrix::from_raw(l.rows(), l.cols(), d));
                }
            }
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads: leaf_grads,
        })
    }
}

fn accumulate(adj: &mut [Option<DenseMatrix>], v: Var, g: DenseMatrix) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &DenseMatrix) -> DenseMatrix {
    let n = g.cols();
    let mut out = vec![0.0; n];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    DenseMatrix::from_raw(1, n, out)
}

/// (sum p*y, sum p, sum y) with `p = sigmoid(logit)`.
fn dice_sums(logits: &DenseMatrix, target: &DenseMatrix) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_y = 0.0;
    for (&l, &y) in logits.as_slice().iter().zip(target.as_slice()) {
        let p = sigmoid(l);
        inter += p * y;
        sum_p += p;
        sum_y += y;
    }
    (inter, sum_p, sum_y)
}
