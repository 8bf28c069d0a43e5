//! Quantized execution: hybrid (8-bit matmuls, float everywhere else) and
//! integer-only (8-bit matmuls, 16-bit vector arithmetic, integer layer norm).

mod integer;
pub(crate) use integer::gate_names;
mod layernorm;

use thiserror::Error;

use crate::blocksparse::BlockSparseMatrix;
use crate::cells::{Cell, MatrixRole};
use crate::fixedpoint::{check_finite, max_abs, BitWidth, QuantError, QuantParams};
use crate::linear::{Linear, MatVec};
use crate::matrix::Matrix;

pub use integer::{
    quantize_cell_weights, GateTail, IntCellState, IntGateWeights, IntegerCell, IntegerCellWeights, M_FRAC_BITS_LSTM,
    M_FRAC_BITS_SRU,
};
pub use layernorm::{integer_layer_norm, normalize, IntLayerNorm, LN_NORM_FRAC_BITS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvertError {
    #[error("calibration stats missing for: {}", .0.join(", "))]
    MissingStats(Vec<String>),

    #[error("{tensor}: {source}")]
    Tensor {
        tensor: String,
        #[source]
        source: QuantError,
    },

    #[error("{tensor}: expected {expected} stats, got {actual}")]
    WrongWidth { tensor: String, expected: BitWidth, actual: BitWidth },
}

impl ConvertError {
    pub(crate) fn tensor(name: impl Into<String>) -> impl FnOnce(QuantError) -> ConvertError {
        let tensor = name.into();
        move |source| ConvertError::Tensor { tensor, source }
    }
}

/// 8-bit weights, dense or block-sparse.
#[derive(Debug, Clone, PartialEq)]
pub enum QMatrix {
    Dense(Matrix<i8>),
    Sparse(BlockSparseMatrix<i8>),
}

/// 8-bit weight matrix with its per-tensor scale.
///
/// As a [`MatVec`] it runs the hybrid scheme: the float input is quantized on
/// the fly with `s_x = max|x| / 127` and the integer accumulators are scaled
/// back by `s_W · s_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct QLinear {
    weights: QMatrix,
    params: QuantParams,
}

fn quantize_i8(v: f32, params: &QuantParams) -> i8 {
    params.quantize_value(v) as i8
}

impl QLinear {
    /// Quantizes with `s_W = max|W| / 127` (scale 1 for an all-zero matrix).
    pub fn quantize(l: &Linear) -> Result<Self, QuantError> {
        let values = match l {
            Linear::Dense(m) => m.as_slice(),
            Linear::Sparse(m) => m.data(),
        };
        check_finite(values)?;
        let params = QuantParams::from_max_abs(max_abs(values), BitWidth::W8)?;
        let weights = match l {
            Linear::Dense(m) => QMatrix::Dense(m.map(|&v| quantize_i8(v, &params))),
            Linear::Sparse(m) => QMatrix::Sparse(m.map_values(|&v| quantize_i8(v, &params))),
        };
        Ok(Self { weights, params })
    }

    pub fn from_parts(weights: QMatrix, params: QuantParams) -> Result<Self, QuantError> {
        if params.bits() != BitWidth::W8 {
            return Err(QuantError::UnsupportedBitWidth(params.bits().bits()));
        }
        Ok(Self { weights, params })
    }

    pub fn weights(&self) -> &QMatrix {
        &self.weights
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn scale(&self) -> f32 {
        self.params.scale()
    }

    pub fn dequantize(&self) -> Linear {
        let s = self.scale();
        match &self.weights {
            QMatrix::Dense(m) => Linear::Dense(m.map(|&q| q as f32 * s)),
            QMatrix::Sparse(m) => Linear::Sparse(m.map_values(|&q| q as f32 * s)),
        }
    }

    /// Integer-exact `y = Wq · x` with 32-bit accumulators.
    #[inline]
    pub fn matvec_i8_into(&self, x: &[i8], y: &mut [i32]) {
        match &self.weights {
            QMatrix::Dense(m) => m.matvec_i8_into(x, y),
            QMatrix::Sparse(m) => m.matvec_i8_into(x, y),
        }
    }
}

impl MatVec for QLinear {
    fn rows(&self) -> usize {
        match &self.weights {
            QMatrix::Dense(m) => m.rows(),
            QMatrix::Sparse(m) => m.rows(),
        }
    }

    fn cols(&self) -> usize {
        match &self.weights {
            QMatrix::Dense(m) => m.cols(),
            QMatrix::Sparse(m) => m.cols(),
        }
    }

    fn matvec_into(&self, x: &[f32], y: &mut [f32]) {
        let m = max_abs(x);
        if m == 0.0 {
            y.fill(0.0);
            return;
        }
        let sx = m / 127.0;
        let xq: Vec<i8> = x.iter().map(|&v| (v / sx).round().clamp(-127.0, 127.0) as i8).collect();
        let mut acc = vec![0i32; y.len()];
        self.matvec_i8_into(&xq, &mut acc);
        let s = self.scale() * sx;
        for (o, &a) in y.iter_mut().zip(&acc) {
            *o = a as f32 * s;
        }
    }

    fn stored_params(&self) -> usize {
        match &self.weights {
            QMatrix::Dense(m) => m.rows() * m.cols(),
            QMatrix::Sparse(m) => m.data().len(),
        }
    }
}

/// One hybrid matrix-vector product.
pub fn hybrid_matvec(w: &QLinear, x: &[f32]) -> Vec<f32> {
    let mut y = vec![0.0; w.rows()];
    w.matvec_into(x, &mut y);
    y
}

/// Hybrid conversion of one cell: every matrix to 8 bits, everything else kept.
pub fn convert_cell_to_hybrid(cell: &Cell<Linear>) -> Result<Cell<QLinear>, QuantError> {
    cell.try_map(|_: MatrixRole, l| QLinear::quantize(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocksparse::BlockShape;
    use crate::cells::{CellDims, CellKind, CellState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_zero() {
        let w = QLinear::quantize(&Linear::Dense(Matrix::from_fn(4, 3, |r, c| (r + c) as f32))).unwrap();
        assert_eq!(hybrid_matvec(&w, &[0.0; 3]), vec![0.0; 4]);
    }

    #[test]
    fn weight_scale_from_max_abs() {
        let w = QLinear::quantize(&Linear::Dense(Matrix::from_vec(1, 2, vec![2.54, -1.0]).unwrap())).unwrap();
        assert!((w.scale() - 0.02).abs() < 1e-9);
        let z = QLinear::quantize(&Linear::Dense(Matrix::zeros(2, 2))).unwrap();
        assert_eq!(z.scale(), 1.0);
        assert_eq!(z.weights(), &QMatrix::Dense(Matrix::zeros(2, 2)));
    }

    #[test]
    fn representable_diagonal_is_exact() {
        // s_W = 1 and s_x = 1: weights and inputs are already integers
        let w = Matrix::from_fn(3, 3, |r, c| if r == c { [127.0, -64.0, 32.0][r] } else { 0.0 });
        let q = QLinear::quantize(&Linear::Dense(w.clone())).unwrap();
        let x = [127.0, 5.0, -100.0];
        assert_eq!(hybrid_matvec(&q, &x), w.matvec(&x).unwrap());
    }

    #[test]
    fn error_within_analytic_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w = Matrix::from_fn(64, 64, |_, _| rng.gen_range(-1.0f32..=1.0));
            let x: Vec<f32> = (0..64).map(|_| rng.gen_range(-3.0f32..=3.0)).collect();
            let q = QLinear::quantize(&Linear::Dense(w.clone())).unwrap();
            let y = hybrid_matvec(&q, &x);
            let exact = w.matvec(&x).unwrap();
            let (sw, sx) = (q.scale() as f64, max_abs(&x) as f64 / 127.0);
            let sum_x: f64 = x.iter().map(|v| v.abs() as f64).sum();
            for r in 0..64 {
                let sum_w: f64 = w.row(r).iter().map(|v| v.abs() as f64).sum();
                let bound = 0.5 * sx * sum_w + 0.5 * sw * sum_x + 0.25 * 64.0 * sw * sx;
                assert!(((y[r] - exact[r]) as f64).abs() <= bound + 1e-4, "row {r}");
            }
        }
    }

    #[test]
    fn dequantized_weights_within_half_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Matrix::from_fn(32, 8, |_, _| rng.gen_range(-2.0f32..=2.0));
        let l = Linear::Dense(w.clone());
        let q = QLinear::quantize(&l).unwrap();
        let d = q.dequantize().to_dense();
        for (a, b) in d.as_slice().iter().zip(w.as_slice()) {
            assert!((a - b).abs() <= q.scale() / 2.0 + 1e-7);
        }
        let sparse = l.to_sparse(BlockShape::DEFAULT).unwrap();
        let qs = QLinear::quantize(&sparse).unwrap();
        assert_eq!(qs.dequantize().to_dense(), d);
    }

    #[test]
    fn hybrid_cell_tracks_float_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in [CellKind::Lstm, CellKind::Cifg, CellKind::Sru] {
            let cell = Cell::random(CellDims { kind, input: 1, hidden: 1, output: 1, layer_norm: false }, &mut rng);
            let hybrid = convert_cell_to_hybrid(&cell).unwrap();
            let (mut sf, mut sh) = (cell.zero_state(), CellState::zeros(1, 1));
            for _ in 0..20 {
                let x = [rng.gen_range(-1.0f32..=1.0)];
                let hf = cell.step_in_place(&x, &mut sf, &mut crate::cells::NoProbe).unwrap();
                let hh = hybrid.step_in_place(&x, &mut sh, &mut crate::cells::NoProbe).unwrap();
                assert!((hf[0] - hh[0]).abs() <= 0.02, "{kind}: {hf:?} vs {hh:?}");
            }
        }
    }
}
