//! Dense row-major matrices and their matrix-vector kernels.

use crate::simd::avx2_dispatch;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShapeError {
    #[error("{what}: expected length {expected}, got {actual}")]
    Length { what: &'static str, expected: usize, actual: usize },
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<(), ShapeError> {
    if expected == actual {
        Ok(())
    } else {
        Err(ShapeError::Length { what, expected, actual })
    }
}

/// Element types storable in matrices. `is_zero` is an exact bit test, so
/// `-0.0` counts as a non-zero entry and survives sparse round-trips.
pub trait Element: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    fn is_zero(&self) -> bool;
}

impl Element for f32 {
    #[inline]
    fn is_zero(&self) -> bool {
        self.to_bits() == 0
    }
}

impl Element for i8 {
    #[inline]
    fn is_zero(&self) -> bool {
        *self == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Element> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::default(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        check_len("matrix data", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Element>(&self, f: impl FnMut(&T) -> U) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }
}

impl Matrix<f32> {
    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>, ShapeError> {
        check_len("matvec input", self.cols, x.len())?;
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y);
        Ok(y)
    }

    /// `y = self · x`. Lengths are the caller's responsibility.
    pub fn matvec_into(&self, x: &[f32], y: &mut [f32]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        dense_f32(self, x, y);
    }
}

impl Matrix<i8> {
    /// Integer matvec with 32-bit accumulation.
    pub fn matvec_i8_into(&self, x: &[i8], y: &mut [i32]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        dense_i8(self, x, y);
    }
}

avx2_dispatch! {
    fn dense_f32(m: &Matrix<f32>, x: &[f32], y: &mut [f32]) {
        for (r, out) in y.iter_mut().enumerate() {
            *out = dot_f32(m.row(r), x);
        }
    }
}

avx2_dispatch! {
    fn dense_i8(m: &Matrix<i8>, x: &[i8], y: &mut [i32]) {
        for (r, out) in y.iter_mut().enumerate() {
            *out = dot_i8(m.row(r), x);
        }
    }
}

/// Float dot product with eight independent partial sums so the loop vectorizes.
#[inline(always)]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 8;
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let pa = &a[i * LANES..(i + 1) * LANES];
        let pb = &b[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f32>() + tail
}

/// 8-bit dot product with 32-bit accumulation. Callers bound the length to
/// 2^16 so `127 * 127 * len` cannot overflow; wrapping ops keep the loop
/// vectorizable under overflow checks.
#[inline(always)]
pub fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    const LANES: usize = 16;
    let mut acc = [0i32; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let pa = &a[i * LANES..(i + 1) * LANES];
        let pb = &b[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            // |a·b| ≤ 2^14, so the 16-bit product is exact and cheaper to vectorize.
            acc[l] = acc[l].wrapping_add((pa[l] as i16 * pb[l] as i16) as i32);
        }
    }
    let mut sum = acc.iter().fold(0i32, |s, v| s.wrapping_add(*v));
    for i in chunks * LANES..a.len() {
        sum = sum.wrapping_add((a[i] as i32).wrapping_mul(b[i] as i32));
    }
    sum
}
