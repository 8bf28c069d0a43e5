//! Gradual magnitude-based block pruning.
//!
//! Sparsity ramps polynomially from an initial to a final value. The mask is
//! recomputed from the *retained* weights, which pruning never zeroes: a
//! pruned block simply stops contributing to the forward pass and stops
//! receiving gradient. When a later mask update ranks its retained values
//! above some active block, it comes back with the values it had when it was
//! pruned. Mask updates keep running after the schedule ends so early mistakes
//! can still be undone at the final sparsity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocksparse::{BlockShape, BlockSparseError, BlockSparseMatrix};
use crate::matrix::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruningError {
    #[error("invalid pruning schedule: {0}")]
    InvalidSchedule(String),

    #[error("sparsity {0} outside [0, 1]")]
    InvalidSparsity(f64),

    #[error("mask grid {mask_rows}x{mask_cols} does not match matrix block grid {grid_rows}x{grid_cols}")]
    MaskMismatch { mask_rows: usize, mask_cols: usize, grid_rows: usize, grid_cols: usize },

    #[error(transparent)]
    Block(#[from] BlockSparseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSchedule {
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    pub start_step: u64,
    pub end_step: u64,
    #[serde(default = "default_interval")]
    pub mask_update_interval: u64,
    #[serde(default = "default_exponent")]
    pub exponent: u32,
}

fn default_interval() -> u64 {
    1000
}

fn default_exponent() -> u32 {
    3
}

impl PruningSchedule {
    /// Cubic schedule with a mask update every 1000 steps.
    pub fn new(
        initial_sparsity: f64,
        final_sparsity: f64,
        start_step: u64,
        end_step: u64,
    ) -> Result<Self, PruningError> {
        let s = Self {
            initial_sparsity,
            final_sparsity,
            start_step,
            end_step,
            mask_update_interval: default_interval(),
            exponent: default_exponent(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_interval(mut self, interval: u64) -> Result<Self, PruningError> {
        self.mask_update_interval = interval;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), PruningError> {
        let bad = |m: String| Err(PruningError::InvalidSchedule(m));
        if !(0.0..1.0).contains(&self.initial_sparsity) {
            return bad(format!("initial sparsity {} not in [0, 1)", self.initial_sparsity));
        }
        if !(self.final_sparsity > 0.0 && self.final_sparsity <= 1.0) {
            return bad(format!("final sparsity {} not in (0, 1]", self.final_sparsity));
        }
        if self.final_sparsity < self.initial_sparsity {
            return bad("final sparsity below initial sparsity".into());
        }
        if self.end_step <= self.start_step {
            return bad(format!("end step {} must exceed start step {}", self.end_step, self.start_step));
        }
        if self.mask_update_interval == 0 {
            return bad("mask update interval must be positive".into());
        }
        if self.exponent == 0 {
            return bad("exponent must be positive".into());
        }
        Ok(())
    }

    /// Target sparsity at training step `t`.
    pub fn sparsity_at_step(&self, t: u64) -> f64 {
        if t <= self.start_step {
            return self.initial_sparsity;
        }
        if t >= self.end_step {
            return self.final_sparsity;
        }
        let progress = (t - self.start_step) as f64 / (self.end_step - self.start_step) as f64;
        let s = self.final_sparsity
            + (self.initial_sparsity - self.final_sparsity) * (1.0 - progress).powi(self.exponent as i32);
        s.clamp(self.initial_sparsity, self.final_sparsity)
    }
}

/// Active/pruned flag per block of a matrix, row-major over the block grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    grid_rows: usize,
    grid_cols: usize,
    active: Vec<bool>,
}

impl BlockMask {
    pub fn all_active(grid_rows: usize, grid_cols: usize) -> Self {
        Self { grid_rows, grid_cols, active: vec![true; grid_rows * grid_cols] }
    }

    pub fn from_flags(grid_rows: usize, grid_cols: usize, active: Vec<bool>) -> Self {
        assert_eq!(active.len(), grid_rows * grid_cols, "mask length");
        Self { grid_rows, grid_cols, active }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_rows, self.grid_cols)
    }

    pub fn flags(&self) -> &[bool] {
        &self.active
    }

    #[inline]
    pub fn is_active(&self, block_row: usize, block_col: usize) -> bool {
        self.active[block_row * self.grid_cols + block_col]
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn pruned_count(&self) -> usize {
        self.active.iter().filter(|a| !**a).count()
    }

    pub fn sparsity(&self) -> f64 {
        if self.active.is_empty() {
            return 0.0;
        }
        self.pruned_count() as f64 / self.active.len() as f64
    }

    fn check(&self, m: &Matrix<f32>, block: BlockShape) -> Result<(), PruningError> {
        let (grid_rows, grid_cols) = block.grid(m.rows(), m.cols())?;
        if (grid_rows, grid_cols) != (self.grid_rows, self.grid_cols) {
            return Err(PruningError::MaskMismatch {
                mask_rows: self.grid_rows,
                mask_cols: self.grid_cols,
                grid_rows,
                grid_cols,
            });
        }
        Ok(())
    }
}

/// Number of blocks to prune: `⌊sparsity · n + 0.5⌋`.
pub fn pruned_block_count(sparsity: f64, n: usize) -> usize {
    ((sparsity * n as f64 + 0.5).floor() as usize).min(n)
}

/// L1 norm of every block, row-major over the block grid.
pub fn block_l1_norms(m: &Matrix<f32>, block: BlockShape) -> Result<Vec<f64>, PruningError> {
    let (grid_rows, grid_cols) = block.grid(m.rows(), m.cols())?;
    let mut norms = vec![0.0f64; grid_rows * grid_cols];
    for r in 0..m.rows() {
        let row = m.row(r);
        let base = (r / block.rows) * grid_cols;
        for (c, v) in row.iter().enumerate() {
            norms[base + c / block.cols] += v.abs() as f64;
        }
    }
    Ok(norms)
}

/// Masks off the lowest-L1 blocks. Ties prune the earlier (row-major) block first.
pub fn compute_block_mask(retained: &Matrix<f32>, sparsity: f64, block: BlockShape) -> Result<BlockMask, PruningError> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(PruningError::InvalidSparsity(sparsity));
    }
    let (grid_rows, grid_cols) = block.grid(retained.rows(), retained.cols())?;
    let norms = block_l1_norms(retained, block)?;
    let k = pruned_block_count(sparsity, norms.len());
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let mut active = vec![true; norms.len()];
    for &i in &order[..k] {
        active[i] = false;
    }
    Ok(BlockMask { grid_rows, grid_cols, active })
}

fn zero_pruned(m: &mut Matrix<f32>, mask: &BlockMask, block: BlockShape) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    for r in 0..data.len() / cols.max(1) {
        let br = r / block.rows;
        let row = &mut data[r * cols..(r + 1) * cols];
        for (c, v) in row.iter_mut().enumerate() {
            if !mask.is_active(br, c / block.cols) {
                *v = 0.0;
            }
        }
    }
}

/// `retained ⊙ mask`: pruned blocks read as exact zeros.
pub fn apply_mask(retained: &Matrix<f32>, mask: &BlockMask, block: BlockShape) -> Result<Matrix<f32>, PruningError> {
    mask.check(retained, block)?;
    let mut out = retained.clone();
    zero_pruned(&mut out, mask, block);
    Ok(out)
}

/// Zeroes the gradient of pruned blocks.
pub fn mask_gradients(grad: &Matrix<f32>, mask: &BlockMask, block: BlockShape) -> Result<Matrix<f32>, PruningError> {
    apply_mask(grad, mask, block)
}

/// What changed in a mask update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskUpdate {
    pub step: u64,
    pub target_sparsity: f64,
    pub sparsity: f64,
    /// Blocks whose flag flipped.
    pub churn: usize,
    /// Blocks that were pruned and became active again.
    pub recovered: usize,
}

/// Pruning state of one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningState {
    pub retained: Matrix<f32>,
    pub mask: BlockMask,
    pub step: u64,
    pub schedule: PruningSchedule,
    pub block: BlockShape,
}

impl PruningState {
    pub fn new(retained: Matrix<f32>, schedule: PruningSchedule, block: BlockShape) -> Result<Self, PruningError> {
        schedule.validate()?;
        let (r, c) = block.grid(retained.rows(), retained.cols())?;
        Ok(Self { retained, mask: BlockMask::all_active(r, c), step: 0, schedule, block })
    }

    pub fn effective(&self) -> Matrix<f32> {
        let mut out = self.retained.clone();
        zero_pruned(&mut out, &self.mask, self.block);
        out
    }

    pub fn mask_gradients(&self, grad: &mut Matrix<f32>) {
        zero_pruned(grad, &self.mask, self.block);
    }

    /// Recomputes the mask when `t` falls on the update interval, including after
    /// the schedule has reached its final sparsity.
    pub fn maybe_update_mask(&mut self, t: u64) -> Result<Option<MaskUpdate>, PruningError> {
        debug_assert!(t >= self.step, "steps must not go backwards");
        self.step = t;
        if !t.is_multiple_of(self.schedule.mask_update_interval) {
            return Ok(None);
        }
        let target = self.schedule.sparsity_at_step(t);
        let new_mask = compute_block_mask(&self.retained, target, self.block)?;
        let mut churn = 0;
        let mut recovered = 0;
        for (old, new) in self.mask.active.iter().zip(&new_mask.active) {
            if old != new {
                churn += 1;
                if *new {
                    recovered += 1;
                }
            }
        }
        self.mask = new_mask;
        Ok(Some(MaskUpdate { step: t, target_sparsity: target, sparsity: self.mask.sparsity(), churn, recovered }))
    }

    pub fn to_block_sparse(&self) -> Result<BlockSparseMatrix<f32>, PruningError> {
        Ok(BlockSparseMatrix::from_dense(&self.effective(), self.block)?)
    }
}

/// One-shot magnitude pruning of `m` to `sparsity`, returned in block-sparse form.
pub fn prune_to_block_sparse(
    m: &Matrix<f32>,
    sparsity: f64,
    block: BlockShape,
) -> Result<BlockSparseMatrix<f32>, PruningError> {
    let mask = compute_block_mask(m, sparsity, block)?;
    let eff = apply_mask(m, &mask, block)?;
    Ok(BlockSparseMatrix::from_dense(&eff, block)?)
}
