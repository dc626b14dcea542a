use std::cell::RefCell;

use crate::{Error, Result};

/// Buffers shorter than this are left to the allocator.
const POOL_MIN_LEN: usize = 1 << 14;
/// Upper bound on bytes held per thread.
const POOL_MAX_BYTES: usize = 1 << 31;

thread_local! {
    // Full-volume passes allocate and drop the same set of large activation
    // buffers every step; reusing them avoids faulting fresh pages each time.
    static POOL: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// A buffer of length `len` with unspecified (but initialized) contents.
pub(crate) fn scratch(len: usize) -> Vec<f64> {
    if len >= POOL_MIN_LEN {
        let reused = POOL.with(|pool| {
            let mut pool = pool.borrow_mut();
            let best = pool
                .iter()
                .enumerate()
                .filter(|(_, b)| b.capacity() >= len)
                .min_by_key(|(_, b)| b.capacity())
                .map(|(i, _)| i)?;
            Some(pool.swap_remove(best))
        });
        if let Some(mut buf) = reused {
            if buf.len() >= len {
                buf.truncate(len);
            } else {
                buf.resize(len, 0.0);
            }
            return buf;
        }
    }
    vec![0.0; len]
}

pub(crate) fn scratch_zeroed(len: usize) -> Vec<f64> {
    let mut buf = scratch(len);
    buf.fill(0.0);
    buf
}

fn recycle(buf: Vec<f64>) {
    if buf.capacity() < POOL_MIN_LEN {
        return;
    }
    // Pool access can fail during thread teardown; the buffer is then freed.
    let _ = POOL.try_with(|pool| {
        let mut pool = pool.borrow_mut();
        let held: usize = pool.iter().map(|b| b.capacity() * 8).sum();
        if held + buf.capacity() * 8 <= POOL_MAX_BYTES {
            pool.push(buf);
        }
    });
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Clone for DenseMatrix {
    fn clone(&self) -> Self {
        let mut data = scratch(self.data.len());
        data.copy_from_slice(&self.data);
        DenseMatrix::from_raw(self.rows, self.cols, data)
    }
}

impl Drop for DenseMatrix {
    fn drop(&mut self) {
        recycle(std::mem::take(&mut self.data));
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major values, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i} is {}", data[i])));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    /// Internal constructor for kernel outputs whose length is known correct.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        std::mem::take(&mut self.data)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::contract(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = scratch(self.rows * other.cols);
        gemm(Operand::plain(self), Operand::plain(other), &mut out, false);
        Ok(DenseMatrix::from_raw(self.rows, other.cols, out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let mut out = scratch(self.data.len());
        for (o, &v) in out.iter_mut().zip(&self.data) {
            *o = f(v);
        }
        DenseMatrix::from_raw(self.rows, self.cols, out)
    }
}

/// Element-wise nonlinearities used by the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn forward(self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }
}

#[inline]
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Largest `f64` strictly below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function evaluated in the branch form that never overflows.
///
/// The result is kept inside the open interval `(0, 1)`: extreme logits
/// saturate at `f64::MIN_POSITIVE` and `1 - 2^-53` instead of rounding to the
/// endpoints.
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

/// Numerically stable `ln(1 + exp(x))`.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    relu(x) + (-x.abs()).exp().ln_1p()
}

/// A borrowed row-major matrix, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a> Operand<'a> {
    pub(crate) fn plain(m: &'a DenseMatrix) -> Self {
        Operand {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            transposed: false,
        }
    }

    pub(crate) fn transposed(m: &'a DenseMatrix) -> Self {
        Operand {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            transposed: true,
        }
    }

    /// (rows, cols) as seen by the product.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// (row stride, col stride) as seen by the product.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (+)= a * b` with the single-threaded blocked kernel from `matrixmultiply`.
pub(crate) fn gemm(a: Operand<'_>, b: Operand<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe in-bounds accesses for slices whose lengths
    // were checked above (rows * cols for both operands, m * n for the output).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_close_rel(a: &DenseMatrix, b: &DenseMatrix, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            let scale = x.abs().max(y.abs()).max(1e-12);
            assert!((x - y).abs() / scale <= tol || (x - y).abs() < 1e-14, "{x} vs {y}");
        }
    }

    #[test]
    fn identity_product() {
        let b = DenseMatrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(DenseMatrix::identity(2).matmul(&b).unwrap(), b);
    }

    #[test]
    fn row_by_column() {
        let a = DenseMatrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = DenseMatrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 4, 5);
        let b = random(&mut rng, 5, 3);
        assert_close_rel(&a.matmul(&b).unwrap(), &naive(&a, &b), 1e-6);
        for _ in 0..100 {
            let (m, k, n) = (rng.gen_range(1..12), rng.gen_range(1..12), rng.gen_range(1..12));
            let a = random(&mut rng, m, k);
            let b = random(&mut rng, k, n);
            assert_close_rel(&a.matmul(&b).unwrap(), &naive(&a, &b), 1e-6);
        }
    }

    #[test]
    fn transposed_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 6, 4);
        let b = random(&mut rng, 6, 5);
        let mut out = vec![0.0; 4 * 5];
        gemm(Operand::transposed(&a), Operand::plain(&b), &mut out, false);
        let expected = naive(&a.transpose(), &b);
        assert_close_rel(&DenseMatrix::from_raw(4, 5, out), &expected, 1e-12);
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(matches!(
            DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        let tiny = Activation::Sigmoid.apply(-1000.0);
        assert!(tiny > 0.0 && tiny <= 1e-300);
        let big = Activation::Sigmoid.apply(1000.0);
        assert!(big < 1.0 && big.is_finite());
        for x in [-700.0, -40.0, -1.0, 1.0, 40.0, 700.0] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0);
            assert!(softplus(x).is_finite());
        }
    }
}
