//! Block-sparse matrix storage for pruned weights.
//!
//! Non-zero blocks are stored contiguously in row-major block order, each block
//! itself row-major. A single `ledger` array indexes them: for every block row,
//! the number of stored blocks followed by their block-column indices in
//! strictly increasing order. With the default 16×1 blocks, one input element
//! updates 16 consecutive outputs.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::matrix::{check_len, Element, Matrix, ShapeError};
use crate::simd::avx2_dispatch;

/// Widest input for which an 8-bit product sum fits a 32-bit accumulator
/// (`127 * 127 * 2^16 < 2^31`).
pub const MAX_I8_ACCUMULATE_COLS: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockSparseError {
    #[error("block shape must be positive, got {0}")]
    InvalidBlockShape(BlockShape),

    #[error("matrix {rows}x{cols} is not divisible by block {block}; pad to {padded_rows}x{padded_cols}")]
    NotDivisible { rows: usize, cols: usize, block: BlockShape, padded_rows: usize, padded_cols: usize },

    #[error("corrupt ledger: {0}")]
    CorruptLedger(String),

    #[error("{cols} input columns exceed the 32-bit accumulator guarantee of {max}")]
    AccumulatorOverflow { cols: usize, max: usize },

    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockShape {
    pub rows: usize,
    pub cols: usize,
}

impl BlockShape {
    pub const DEFAULT: BlockShape = BlockShape { rows: 16, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Result<Self, BlockSparseError> {
        let b = BlockShape { rows, cols };
        if rows == 0 || cols == 0 {
            return Err(BlockSparseError::InvalidBlockShape(b));
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Block-grid dimensions of a `rows × cols` matrix, or the padded shape it needs.
    pub fn grid(&self, rows: usize, cols: usize) -> Result<(usize, usize), BlockSparseError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(BlockSparseError::InvalidBlockShape(*self));
        }
        if !rows.is_multiple_of(self.rows) || !cols.is_multiple_of(self.cols) {
            return Err(BlockSparseError::NotDivisible {
                rows,
                cols,
                block: *self,
                padded_rows: rows.div_ceil(self.rows) * self.rows,
                padded_cols: cols.div_ceil(self.cols) * self.cols,
            });
        }
        Ok((rows / self.rows, cols / self.cols))
    }
}

impl Default for BlockShape {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for BlockShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for BlockShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
        let rows = r.trim().parse().map_err(|e| format!("block rows: {e}"))?;
        let cols = c.trim().parse().map_err(|e| format!("block cols: {e}"))?;
        BlockShape::new(rows, cols).map_err(|e| e.to_string())
    }
}

impl serde::Serialize for BlockShape {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for BlockShape {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Pads `m` with zero rows and columns up to a multiple of the block shape.
pub fn pad_to_blocks<T: Element>(m: &Matrix<T>, block: BlockShape) -> Matrix<T> {
    let rows = m.rows().div_ceil(block.rows) * block.rows;
    let cols = m.cols().div_ceil(block.cols) * block.cols;
    if rows == m.rows() && cols == m.cols() {
        return m.clone();
    }
    Matrix::from_fn(rows, cols, |r, c| if r < m.rows() && c < m.cols() { m.get(r, c) } else { T::default() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseMatrix<T> {
    rows: usize,
    cols: usize,
    block: BlockShape,
    data: Vec<T>,
    ledger: Vec<u32>,
}

impl<T: Element> BlockSparseMatrix<T> {
    /// Stores every block that has at least one non-zero entry (exact test).
    pub fn from_dense(m: &Matrix<T>, block: BlockShape) -> Result<Self, BlockSparseError> {
        let (brows, bcols) = block.grid(m.rows(), m.cols())?;
        let mut data = Vec::new();
        let mut ledger = Vec::new();
        let mut cols_in_row = Vec::with_capacity(bcols);
        for br in 0..brows {
            cols_in_row.clear();
            for bc in 0..bcols {
                let nonzero = (0..block.rows).any(|r| {
                    let row = m.row(br * block.rows + r);
                    row[bc * block.cols..(bc + 1) * block.cols].iter().any(|v| !v.is_zero())
                });
                if nonzero {
                    cols_in_row.push(bc as u32);
                    for r in 0..block.rows {
                        let row = m.row(br * block.rows + r);
                        data.extend_from_slice(&row[bc * block.cols..(bc + 1) * block.cols]);
                    }
                }
            }
            ledger.push(cols_in_row.len() as u32);
            ledger.extend_from_slice(&cols_in_row);
        }
        Ok(Self { rows: m.rows(), cols: m.cols(), block, data, ledger })
    }

    /// Builds from raw parts, validating the ledger against the shape and payload.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        block: BlockShape,
        ledger: Vec<u32>,
        data: Vec<T>,
    ) -> Result<Self, BlockSparseError> {
        let m = Self { rows, cols, block, data, ledger };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), BlockSparseError> {
        let (brows, bcols) = self.block.grid(self.rows, self.cols)?;
        let corrupt = |msg: String| Err(BlockSparseError::CorruptLedger(msg));
        let mut pos = 0;
        let mut stored = 0usize;
        for br in 0..brows {
            let Some(&count) = self.ledger.get(pos) else {
                return corrupt(format!("ledger ends before block row {br}"));
            };
            let count = count as usize;
            pos += 1;
            if count > bcols || pos + count > self.ledger.len() {
                return corrupt(format!("block row {br} claims {count} blocks"));
            }
            let idx = &self.ledger[pos..pos + count];
            if let Some(&bad) = idx.iter().find(|&&c| c as usize >= bcols) {
                return corrupt(format!("block row {br}: column index {bad} >= {bcols}"));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return corrupt(format!("block row {br}: column indices not strictly increasing"));
            }
            pos += count;
            stored += count;
        }
        if pos != self.ledger.len() {
            return corrupt(format!("{} trailing ledger entries", self.ledger.len() - pos));
        }
        if stored * self.block.len() != self.data.len() {
            return corrupt(format!(
                "{stored} blocks need {} values, payload has {}",
                stored * self.block.len(),
                self.data.len()
            ));
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.rows, self.cols);
        let b = self.block;
        for (br, bc, blk) in self.blocks() {
            for r in 0..b.rows {
                for c in 0..b.cols {
                    m.set(br * b.rows + r, bc * b.cols + c, blk[r * b.cols + c]);
                }
            }
        }
        m
    }

    /// Iterates stored blocks as `(block_row, block_col, values)`.
    pub fn blocks(&self) -> Blocks<'_, T> {
        Blocks { m: self, ledger_pos: 0, block_row: 0, remaining: 0, data_pos: 0 }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block_shape(&self) -> BlockShape {
        self.block
    }

    pub fn ledger(&self) -> &[u32] {
        &self.ledger
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn block_rows(&self) -> usize {
        self.rows / self.block.rows
    }

    pub fn total_blocks(&self) -> usize {
        self.block_rows() * (self.cols / self.block.cols)
    }

    pub fn stored_blocks(&self) -> usize {
        self.ledger.len() - self.block_rows()
    }

    /// Fraction of block positions that are not stored.
    pub fn sparsity(&self) -> f64 {
        let total = self.total_blocks();
        if total == 0 {
            return 0.0;
        }
        1.0 - self.stored_blocks() as f64 / total as f64
    }

    /// Bytes needed for the payload and ledger at the given element widths.
    pub fn payload_bytes(&self, bytes_per_value: usize, ledger_bytes_per_entry: usize) -> usize {
        self.data.len() * bytes_per_value + self.ledger.len() * ledger_bytes_per_entry
    }

    /// Applies `f` to every stored value, keeping the sparsity structure.
    pub fn map_values<U: Element>(&self, f: impl FnMut(&T) -> U) -> BlockSparseMatrix<U> {
        BlockSparseMatrix {
            rows: self.rows,
            cols: self.cols,
            block: self.block,
            data: self.data.iter().map(f).collect(),
            ledger: self.ledger.clone(),
        }
    }
}

pub struct Blocks<'a, T> {
    m: &'a BlockSparseMatrix<T>,
    ledger_pos: usize,
    block_row: usize,
    remaining: usize,
    data_pos: usize,
}

impl<'a, T: Element> Iterator for Blocks<'a, T> {
    type Item = (usize, usize, &'a [T]);

    #[inline]
    fn next(&mut self) -> Option<Self::Item> {
        let ledger = &self.m.ledger;
        while self.remaining == 0 {
            if self.ledger_pos >= ledger.len() {
                return None;
            }
            if self.ledger_pos > 0 {
                self.block_row += 1;
            }
            self.remaining = ledger[self.ledger_pos] as usize;
            self.ledger_pos += 1;
            if self.remaining == 0 && self.ledger_pos >= ledger.len() {
                return None;
            }
        }
        let bc = ledger[self.ledger_pos] as usize;
        self.ledger_pos += 1;
        self.remaining -= 1;
        let n = self.m.block.len();
        let blk = &self.m.data[self.data_pos..self.data_pos + n];
        self.data_pos += n;
        Some((self.block_row, bc, blk))
    }
}

impl BlockSparseMatrix<f32> {
    pub fn matvec(&self, x: &[f32]) -> Result<Vec<f32>, ShapeError> {
        check_len("matvec input", self.cols, x.len())?;
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y);
        Ok(y)
    }

    /// `y = self · x`; skipped blocks contribute nothing.
    pub fn matvec_into(&self, x: &[f32], y: &mut [f32]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        sparse_f32(self, x, y);
    }
}

impl BlockSparseMatrix<i8> {
    /// Rejects shapes whose 8-bit products could overflow a 32-bit accumulator.
    pub fn check_accumulator_bound(&self) -> Result<(), BlockSparseError> {
        check_accumulator_bound(self.cols)
    }

    pub fn matvec_quantized(&self, x: &[i8]) -> Result<Vec<i32>, BlockSparseError> {
        self.check_accumulator_bound()?;
        check_len("matvec input", self.cols, x.len())?;
        let mut y = vec![0; self.rows];
        self.matvec_i8_into(x, &mut y);
        Ok(y)
    }

    /// Integer-exact `y = self · x` with 32-bit accumulators.
    pub fn matvec_i8_into(&self, x: &[i8], y: &mut [i32]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        sparse_i8(self, x, y);
    }
}

/// `R×1` blocks with the block row's outputs held in registers. Each output
/// still sums its terms in block order, so results match the generic loop.
/// The ledger walk is written out rather than passed a closure: a closure
/// that fails to inline would lose the caller's target features.
#[inline(always)]
fn column_blocks_f32<const R: usize>(m: &BlockSparseMatrix<f32>, x: &[f32], y: &mut [f32]) {
    let (mut lp, mut dp) = (0, 0);
    for out in y.chunks_exact_mut(R) {
        let count = m.ledger[lp] as usize;
        let cols = &m.ledger[lp + 1..lp + 1 + count];
        let (blocks, _) = m.data[dp..dp + count * R].as_chunks::<R>();
        lp += 1 + count;
        dp += count * R;
        let mut acc = [0.0f32; R];
        for (&bc, blk) in cols.iter().zip(blocks) {
            let xv = x[bc as usize];
            for (a, w) in acc.iter_mut().zip(blk) {
                *a += w * xv;
            }
        }
        out.copy_from_slice(&acc);
    }
}

#[inline(always)]
fn column_blocks_i8<const R: usize>(m: &BlockSparseMatrix<i8>, x: &[i8], y: &mut [i32]) {
    let (mut lp, mut dp) = (0, 0);
    for out in y.chunks_exact_mut(R) {
        let count = m.ledger[lp] as usize;
        let cols = &m.ledger[lp + 1..lp + 1 + count];
        let (blocks, _) = m.data[dp..dp + count * R].as_chunks::<R>();
        lp += 1 + count;
        dp += count * R;
        let mut acc = [0i32; R];
        for (&bc, blk) in cols.iter().zip(blocks) {
            let xv = x[bc as usize] as i16;
            for (a, &w) in acc.iter_mut().zip(blk) {
                // |w·x| ≤ 2^14, so the 16-bit product is exact.
                *a = a.wrapping_add((w as i16 * xv) as i32);
            }
        }
        out.copy_from_slice(&acc);
    }
}

avx2_dispatch! {
    fn sparse_f32(m: &BlockSparseMatrix<f32>, x: &[f32], y: &mut [f32]) {
        let b = m.block;
        match (b.rows, b.cols) {
            (16, 1) => return column_blocks_f32::<16>(m, x, y),
            (8, 1) => return column_blocks_f32::<8>(m, x, y),
            (4, 1) => return column_blocks_f32::<4>(m, x, y),
            _ => {}
        }
        y.fill(0.0);
        if b.cols == 1 {
            for (br, bc, blk) in m.blocks() {
                let xv = x[bc];
                let out = &mut y[br * b.rows..(br + 1) * b.rows];
                for (o, w) in out.iter_mut().zip(blk) {
                    *o += w * xv;
                }
            }
        } else {
            for (br, bc, blk) in m.blocks() {
                let xs = &x[bc * b.cols..(bc + 1) * b.cols];
                for r in 0..b.rows {
                    let wr = &blk[r * b.cols..(r + 1) * b.cols];
                    let mut acc = y[br * b.rows + r];
                    for (w, xv) in wr.iter().zip(xs) {
                        acc += w * xv;
                    }
                    y[br * b.rows + r] = acc;
                }
            }
        }
    }
}

avx2_dispatch! {
    fn sparse_i8(m: &BlockSparseMatrix<i8>, x: &[i8], y: &mut [i32]) {
        let b = m.block;
        match (b.rows, b.cols) {
            (16, 1) => return column_blocks_i8::<16>(m, x, y),
            (8, 1) => return column_blocks_i8::<8>(m, x, y),
            (4, 1) => return column_blocks_i8::<4>(m, x, y),
            _ => {}
        }
        y.fill(0);
        if b.cols == 1 {
            for (br, bc, blk) in m.blocks() {
                let xv = x[bc] as i32;
                let out = &mut y[br * b.rows..(br + 1) * b.rows];
                for (o, &w) in out.iter_mut().zip(blk) {
                    *o = o.wrapping_add((w as i32).wrapping_mul(xv));
                }
            }
        } else {
            for (br, bc, blk) in m.blocks() {
                let xs = &x[bc * b.cols..(bc + 1) * b.cols];
                for r in 0..b.rows {
                    let wr = &blk[r * b.cols..(r + 1) * b.cols];
                    let mut acc = y[br * b.rows + r];
                    for (&w, &xv) in wr.iter().zip(xs) {
                        acc = acc.wrapping_add((w as i32).wrapping_mul(xv as i32));
                    }
                    y[br * b.rows + r] = acc;
                }
            }
        }
    }
}

pub fn check_accumulator_bound(cols: usize) -> Result<(), BlockSparseError> {
    if cols > MAX_I8_ACCUMULATE_COLS {
        return Err(BlockSparseError::AccumulatorOverflow { cols, max: MAX_I8_ACCUMULATE_COLS });
    }
    Ok(())
}
