//! Weight matrices as seen by the recurrent cells.

use crate::blocksparse::{BlockShape, BlockSparseError, BlockSparseMatrix};
use crate::matrix::Matrix;

/// A matrix that can be multiplied with a float vector.
///
/// Float and hybrid cells share one implementation and differ only in the
/// `MatVec` they are instantiated with.
pub trait MatVec: Send + Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn matvec_into(&self, x: &[f32], y: &mut [f32]);
    /// Parameters actually stored (pruned blocks excluded).
    fn stored_params(&self) -> usize;
}

/// Float weights, dense or block-sparse.
#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    Dense(Matrix<f32>),
    Sparse(BlockSparseMatrix<f32>),
}

impl Linear {
    pub fn to_dense(&self) -> Matrix<f32> {
        match self {
            Linear::Dense(m) => m.clone(),
            Linear::Sparse(m) => m.to_dense(),
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, Linear::Sparse(_))
    }

    pub fn to_sparse(&self, block: BlockShape) -> Result<Linear, BlockSparseError> {
        Ok(Linear::Sparse(BlockSparseMatrix::from_dense(&self.to_dense(), block)?))
    }

    pub fn matvec(&self, x: &[f32]) -> Vec<f32> {
        let mut y = vec![0.0; self.rows()];
        self.matvec_into(x, &mut y);
        y
    }
}

impl From<Matrix<f32>> for Linear {
    fn from(m: Matrix<f32>) -> Self {
        Linear::Dense(m)
    }
}

impl MatVec for Linear {
    fn rows(&self) -> usize {
        match self {
            Linear::Dense(m) => m.rows(),
            Linear::Sparse(m) => m.rows(),
        }
    }

    fn cols(&self) -> usize {
        match self {
            Linear::Dense(m) => m.cols(),
            Linear::Sparse(m) => m.cols(),
        }
    }

    #[inline]
    fn matvec_into(&self, x: &[f32], y: &mut [f32]) {
        match self {
            Linear::Dense(m) => m.matvec_into(x, y),
            Linear::Sparse(m) => m.matvec_into(x, y),
        }
    }

    fn stored_params(&self) -> usize {
        match self {
            Linear::Dense(m) => m.rows() * m.cols(),
            Linear::Sparse(m) => m.data().len(),
        }
    }
}
