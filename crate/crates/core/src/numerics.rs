//! Dense vector and matrix primitives.
//!
//! Stored values may be `f32` (model parameters, file payloads) or `f64`
//! (activations, embeddings in memory); every reduction accumulates in
//! `f64` with a fixed summation order, so results never depend on how work
//! is split across threads.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wide::f64x8;

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("vector norm is below {NORM_EPS:e}")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Storage scalar for parameters and payloads. Arithmetic is done in `f64`.
pub trait Scalar: Copy + Send + Sync + PartialEq + fmt::Debug + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
}

const LANES: usize = 8;

/// Dot product with eight interleaved accumulators, combined pairwise.
///
/// The summation order depends only on the slice length, never on the
/// caller, which keeps every consumer bit-reproducible.
#[inline]
pub fn dot<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = f64x8::ZERO;
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        acc += widen(xa) * widen(xb);
    }
    let acc = acc.to_array();
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x.to_f64() * y.to_f64();
    }
    combine_lanes(&acc, tail)
}

#[inline(always)]
fn combine_lanes(acc: &[f64; LANES], tail: f64) -> f64 {
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

/// Loads eight lanes as f64; separate mul and add keep results identical
/// to the scalar formulation on every target.
#[inline(always)]
fn widen<B: Scalar>(x: &[B]) -> f64x8 {
    f64x8::new(std::array::from_fn(|l| x[l].to_f64()))
}

/// Four dot products sharing the left operand; each result is bit-identical
/// to [`dot`] of the same pair.
#[inline]
pub fn dot4<A: Scalar, B: Scalar>(a: &[A], xs: [&[B]; 4]) -> [f64; 4] {
    let n = a.len();
    for x in &xs {
        debug_assert_eq!(x.len(), n);
    }
    let body = n - n % LANES;
    let [x0, x1, x2, x3] = xs;
    let mut acc = [f64x8::ZERO; 4];
    let it = a[..body]
        .chunks_exact(LANES)
        .zip(x0[..body].chunks_exact(LANES))
        .zip(x1[..body].chunks_exact(LANES))
        .zip(x2[..body].chunks_exact(LANES))
        .zip(x3[..body].chunks_exact(LANES));
    for ((((ca, c0), c1), c2), c3) in it {
        let av = widen(ca);
        acc[0] += av * widen(c0);
        acc[1] += av * widen(c1);
        acc[2] += av * widen(c2);
        acc[3] += av * widen(c3);
    }
    let acc = acc.map(|v| v.to_array());
    let mut out = [0.0; 4];
    for (k, x) in xs.iter().enumerate() {
        let mut tail = 0.0;
        for i in body..n {
            tail += a[i].to_f64() * x[i].to_f64();
        }
        out[k] = combine_lanes(&acc[k], tail);
    }
    out
}

/// `y += alpha * x`
#[inline]
pub fn axpy<S: Scalar>(y: &mut [f64], alpha: f64, x: &[S]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi.to_f64();
    }
}

#[inline]
pub fn norm<S: Scalar>(v: &[S]) -> f64 {
    dot(v, v).sqrt()
}

/// Finite, nonempty real vector.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(NumericsError::EmptyInput);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn from_scalars<S: Scalar>(values: &[S]) -> Result<Self> {
        Self::new(values.iter().map(|v| v.to_f64()).collect())
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "zero-dimensional vector");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|v| v * s).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("EmbeddingVector").field(&self.0).finish()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = NumericsError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix of 32-bit entries.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    entries: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(NumericsError::EmptyInput);
        }
        if entries.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch { expected: rows * cols, got: entries.len() });
        }
        if let Some(index) = entries.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { index });
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut entries = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::DimensionMismatch { expected: cols, got: r.len() });
            }
            entries.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, entries)
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self { rows: n, cols: n, entries }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f32] {
        &mut self.entries
    }

    pub fn into_entries(self) -> Vec<f32> {
        self.entries
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(NumericsError::DimensionMismatch { expected, got })
    }
}

pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let n = v.norm();
    if n < NORM_EPS {
        return Err(NumericsError::ZeroNorm);
    }
    Ok(EmbeddingVector(v.0.iter().map(|x| x / n).collect()))
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    cosine_slices(&a.0, &b.0)
}

/// Cosine of two raw slices, clamped to `[-1, 1]`.
pub fn cosine_slices<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(NumericsError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `W x + b`
pub fn affine_map(w: &Matrix, b: &EmbeddingVector, x: &EmbeddingVector) -> Result<EmbeddingVector> {
    check_dim(w.cols, x.dim())?;
    check_dim(w.rows, b.dim())?;
    let out = (0..w.rows).map(|i| dot(w.row(i), &x.0) + b.0[i]).collect();
    Ok(EmbeddingVector(out))
}

/// Entrywise mean, summed left to right in the given order.
pub fn mean_vector(vs: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let first = vs.first().ok_or(NumericsError::EmptyInput)?;
    let mut acc = vec![0.0; first.dim()];
    for v in vs {
        check_dim(first.dim(), v.dim())?;
        for (a, x) in acc.iter_mut().zip(&v.0) {
            *a += x;
        }
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(EmbeddingVector(acc))
}
