//! Dense f64 kernel shared by every other module.
//!
//! Storage is row-major and every reduction runs in a fixed index order, so a
//! given input always produces the same bits. The parallel similarity product
//! computes each output entry with the same serial dot product, which keeps it
//! bit-identical to the serial path.

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Norm below which a row is treated as degenerate.
pub const ZERO_NORM: f64 = 1e-30;

/// Tolerance used when deciding whether stored embeddings are unit-norm.
///
/// The binary corpus format stores f32, which perturbs norms by ~1e-7, so the
/// check is looser than f64 round-off alone would need.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
    }

    /// Matrix with i.i.d. N(0, scale²) entries.
    pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let values = (0..rows * cols).map(|_| scale * rng.normal()).collect();
        Self { rows, cols, values }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (p, &a_ip) in a.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                for (o_j, &b) in o.iter_mut().zip(other.row(p)) {
                    *o_j += a_ip * b;
                }
            }
        }
        Ok(out)
    }

    /// Similarity product `self · otherᵀ`: entry (i, j) is `dot(self[i], other[j])`.
    pub fn similarity(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same_cols(other)?;
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// Row-parallel `self · otherᵀ`; bit-identical to [`DenseMatrix::similarity`].
    pub fn par_similarity(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same_cols(other)?;
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        if other.rows == 0 {
            return Ok(out);
        }
        out.values
            .par_chunks_mut(other.rows)
            .enumerate()
            .for_each(|(i, o)| {
                let a = self.row(i);
                for (j, o) in o.iter_mut().enumerate() {
                    *o = dot(a, other.row(j));
                }
            });
        Ok(out)
    }

    fn check_same_cols(&self, other: &DenseMatrix) -> Result<()> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "similarity of {}-dim and {}-dim rows",
                self.cols, other.cols
            )));
        }
        Ok(())
    }

    /// Every row has unit Euclidean norm within `tol`.
    pub fn rows_are_unit(&self, tol: f64) -> bool {
        self.row_iter().all(|r| (norm(r) - 1.0).abs() <= tol)
    }

    pub fn normalize_rows(&self) -> Result<DenseMatrix> {
        normalize_rows(self)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scale every row to unit Euclidean norm.
pub fn normalize_rows(m: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = m.clone();
    for i in 0..m.rows {
        let r = out.row_mut(i);
        let n = norm(r);
        if n < ZERO_NORM {
            return Err(Error::ZeroRow { row: i });
        }
        // Already-unit rows are left untouched so normalization is idempotent
        // bit for bit.
        if n != 1.0 {
            r.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(out)
}

/// Unit vector in the direction of `v`.
pub fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n < ZERO_NORM {
        return Err(Error::ZeroRow { row: 0 });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Max-shifted `log Σ exp(vᵢ)`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(log_sum_exp_unchecked(v))
}

#[inline]
pub(crate) fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for &x in v {
        s += (x - max).exp();
    }
    max + s.ln()
}

/// Softmax of `v` written into `out`; returns the log-sum-exp.
pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) -> f64 {
    let lse = log_sum_exp_unchecked(v);
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - lse).exp();
    }
    lse
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum after sorting ascending, so the result does not depend on input order.
pub fn sorted_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteEvaluation { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Elementwise `|a − n| / max(1, |a|)`, maximized over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Angle between two vectors in `[0, π]`.
///
/// Uses `2·atan2(‖â − b̂‖, ‖â + b̂‖)`, which is exact at zero for identical
/// directions, unlike `acos` of a rounded cosine.
pub fn angle_between(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na < 1e-12 || nb < 1e-12 {
        return None;
    }
    let mut diff = 0.0;
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Some(2.0 * diff.sqrt().atan2(sum.sqrt()))
}

/// Seeded ChaCha20 stream; identical seed and stream id give identical output
/// on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha20";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Independent sub-stream of the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        Self::ALGORITHM
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        rand::Rng::random_range(&mut self.inner, 0..n)
    }

    /// Uniform point on the unit sphere in `dim` dimensions.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.normal()).collect();
            if let Ok(u) = normalized(&v) {
                return u;
            }
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `rows × cols` matrix with orthonormal columns (`rows ≥ cols`), from the QR
/// factor of a seeded Gaussian matrix with the sign convention `diag(R) > 0`.
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut SeededRng) -> Result<DenseMatrix> {
    let g = DenseMatrix::gaussian(rows, cols, 1.0, rng);
    orthonormalize_columns(&g)
}

/// Q factor of `m` with `diag(R) > 0`, so the result is a continuous function
/// of `m` and equals `m` when `m` already has orthonormal columns.
pub fn orthonormalize_columns(m: &DenseMatrix) -> Result<DenseMatrix> {
    if m.cols > m.rows {
        return Err(Error::ShapeMismatch(format!(
            "cannot orthonormalize {} columns in {} dimensions",
            m.cols, m.rows
        )));
    }
    let a = DMatrix::from_row_slice(m.rows, m.cols, m.as_slice());
    let qr = a.qr();
    let q = qr.q();
    let r = qr.r();
    let mut out = DenseMatrix::zeros(m.rows, m.cols);
    for j in 0..m.cols {
        let rjj = r[(j, j)];
        if rjj.abs() < ZERO_NORM {
            return Err(Error::DegenerateBatch(format!("column {j} is linearly dependent")));
        }
        let sign = rjj.signum();
        for i in 0..m.rows {
            out.set(i, j, sign * q[(i, j)]);
        }
    }
    Ok(out)
}

/// Random `dim × dim` orthogonal matrix.
pub fn random_rotation(dim: usize, rng: &mut SeededRng) -> Result<DenseMatrix> {
    random_orthonormal(dim, dim, rng)
}

/// `y = M x`.
pub fn mat_vec(m: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    m.row_iter().map(|r| dot(r, x)).collect()
}
