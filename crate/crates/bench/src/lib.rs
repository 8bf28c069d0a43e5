//! Shared fixtures for the criterion benches.

use ernn_core::calibrate::{cell_dynamic_tensors, cell_tensor_id};
use ernn_core::cells::{CellDims, Probe};
use ernn_core::quant::{quantize_cell_weights, IntegerCell};
use ernn_core::{BitWidth, Cell, CellKind, Linear, Matrix, QuantParams, RangeObserver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Encoder-layer shape of the baseline model.
pub const HIDDEN: usize = 2048;
pub const PROJECTION: usize = 640;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0f32..=1.0))
}

pub fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()
}

pub fn baseline_dims(kind: CellKind) -> CellDims {
    CellDims { kind, input: PROJECTION, hidden: HIDDEN, output: PROJECTION, layer_norm: true }
}

struct Prefixed<'a>(&'a mut RangeObserver);

impl Probe for Prefixed<'_> {
    fn record(&mut self, name: &'static str, values: &[f32]) {
        self.0.observe(&cell_tensor_id("l", name), values).expect("finite activations");
    }
}

/// Integer version of `cell` with ranges observed over `inputs`, plus the input
/// quantization it expects.
pub fn calibrated_integer(cell: &Cell<Linear>, inputs: &[Vec<f32>]) -> (IntegerCell, QuantParams) {
    let mut obs = RangeObserver::new();
    for (id, bits) in cell_dynamic_tensors(cell.kind(), "l") {
        obs.register(&id, bits);
    }
    obs.register("x", BitWidth::W8);
    let mut s = cell.zero_state();
    for x in inputs {
        obs.observe("x", x).expect("finite input");
        cell.step_in_place(x, &mut s, &mut Prefixed(&mut obs)).expect("float step");
    }
    let scales = obs.finalize().expect("scales");
    let input = scales["x"];
    let weights = quantize_cell_weights(cell).expect("weights");
    (IntegerCell::build(weights, "l", input, &scales).expect("integer cell"), input)
}

pub fn quantize_input(x: &[f32], p: QuantParams) -> Vec<i8> {
    x.iter().map(|&v| p.quantize_value(v) as i8).collect()
}
