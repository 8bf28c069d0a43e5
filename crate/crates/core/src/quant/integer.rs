//! Integer-only cell execution.
//!
//! Per gate: 8-bit matmuls into 32-bit accumulators, each rescaled onto the
//! calibrated 16-bit pre-activation grid and added with saturation, then either
//! integer layer norm (output at the gain scale) or a bias at Q3.12, then a
//! rescale to Q3.12 and the table-driven sigmoid/tanh (Q0.15). The cell state is
//! Q3.12. The cell output `m` is narrowed to 8 bits at its calibrated scale,
//! projected, and narrowed again to the layer's 8-bit output scale.
//!
//! All rescale multipliers are built in [`IntegerCell::build`]; stepping uses
//! integer arithmetic only.

use crate::calibrate::{cell_tensor_id, ScaleMap};
use crate::cells::{Cell, CellError, CellKind, Gate};
use crate::fixedpoint::{
    fixed_sigmoid, fixed_tanh, quantize_with, shift_round, BitWidth, Multiplier, QuantParams, QuantizedTensor,
    Q0_15_ONE, Q3_12_FRAC_BITS,
};
use crate::linear::{Linear, MatVec};

use super::layernorm::IntLayerNorm;
use super::{ConvertError, QLinear};

/// Fractional bits of `m` for LSTM and CIFG cells (Q0.15: `|m| < 1`).
pub const M_FRAC_BITS_LSTM: u32 = 15;
/// Fractional bits of `m` for SRU cells (Q3.12: the highway branch is not bounded by 1).
pub const M_FRAC_BITS_SRU: u32 = 12;

fn q3_12() -> f64 {
    (-(Q3_12_FRAC_BITS as f64)).exp2()
}

/// What follows the matmuls of a gate.
#[derive(Debug, Clone, PartialEq)]
pub enum GateTail {
    /// Integer layer norm with the (fused) bias as its bias.
    Norm(IntLayerNorm),
    /// Plain bias, 32-bit at Q3.12.
    Bias(QuantizedTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntGateWeights {
    pub input: QLinear,
    pub recurrent: Option<QLinear>,
    pub tail: GateTail,
}

/// Quantized parameters of one cell, independent of calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerCellWeights {
    pub kind: CellKind,
    /// Gates in [`Cell::gates`] order.
    pub gates: Vec<IntGateWeights>,
    /// SRU only: normalization of `c` before `tanh`.
    pub cell_norm: Option<IntLayerNorm>,
    pub projection: QLinear,
}

impl IntegerCellWeights {
    pub fn gate_names(&self) -> &'static [&'static str] {
        gate_names(self.kind)
    }

    pub fn hidden_width(&self) -> usize {
        self.projection.cols()
    }

    pub fn input_width(&self) -> usize {
        self.gates[0].input.cols()
    }

    pub fn output_width(&self) -> usize {
        self.projection.rows()
    }
}

pub(crate) fn gate_names(kind: CellKind) -> &'static [&'static str] {
    match kind {
        CellKind::Lstm => &["input_gate", "forget_gate", "cell_input", "output_gate"],
        CellKind::Cifg => &["forget_gate", "cell_input", "output_gate"],
        CellKind::Sru => &["forget_gate", "reset_gate", "x1", "x2"],
    }
}

fn quantize_gate(name: &str, g: &Gate<Linear>) -> Result<IntGateWeights, ConvertError> {
    let input = QLinear::quantize(&g.input).map_err(ConvertError::tensor(format!("{name}.W")))?;
    let recurrent = match &g.recurrent {
        Some(r) => Some(QLinear::quantize(r).map_err(ConvertError::tensor(format!("{name}.R")))?),
        None => None,
    };
    let tail = match &g.norm_gain {
        Some(gain) => {
            GateTail::Norm(IntLayerNorm::from_float(gain, &g.bias).map_err(ConvertError::tensor(format!("{name}.ln")))?)
        }
        None => {
            crate::fixedpoint::check_finite(&g.bias).map_err(ConvertError::tensor(format!("{name}.b")))?;
            let p = QuantParams::new(q3_12() as f32, BitWidth::W32).expect("valid scale");
            GateTail::Bias(quantize_with(&g.bias, p))
        }
    };
    Ok(IntGateWeights { input, recurrent, tail })
}

/// Quantizes the static parameters of a float cell.
pub fn quantize_cell_weights(cell: &Cell<Linear>) -> Result<IntegerCellWeights, ConvertError> {
    let gates = cell.gates().into_iter().map(|(name, g)| quantize_gate(name, g)).collect::<Result<Vec<_>, _>>()?;
    let cell_norm = match cell {
        Cell::Sru(w) => match &w.cell_norm {
            Some(n) if n.enabled => {
                Some(IntLayerNorm::from_float(&n.gain, &n.bias).map_err(ConvertError::tensor("cell_norm"))?)
            }
            _ => None,
        },
        _ => None,
    };
    let projection = QLinear::quantize(cell.projection()).map_err(ConvertError::tensor("projection"))?;
    Ok(IntegerCellWeights { kind: cell.kind(), gates, cell_norm, projection })
}

#[derive(Debug, Clone, PartialEq)]
struct GateRescale {
    input: Multiplier,
    recurrent: Option<Multiplier>,
    to_q3_12: Multiplier,
}

/// An integer cell ready to step: quantized weights plus precomputed rescales.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerCell {
    weights: IntegerCellWeights,
    rescale: Vec<GateRescale>,
    cell_norm_to_q3_12: Option<Multiplier>,
    m_frac_bits: u32,
    m_rescale: Multiplier,
    out_rescale: Multiplier,
    input: QuantParams,
    output: QuantParams,
}

/// Integer recurrent state: Q3.12 cell and the 8-bit previous output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntCellState {
    pub c: Vec<i16>,
    pub h: Vec<i8>,
}

fn lookup(scales: &ScaleMap, id: &str, bits: BitWidth) -> Result<QuantParams, ConvertError> {
    let p = *scales.get(id).ok_or_else(|| ConvertError::MissingStats(vec![id.to_string()]))?;
    if p.bits() != bits {
        return Err(ConvertError::WrongWidth { tensor: id.to_string(), expected: bits, actual: p.bits() });
    }
    Ok(p)
}

fn multiplier(id: &str, real: f64) -> Result<Multiplier, ConvertError> {
    Multiplier::from_real(real).map_err(ConvertError::tensor(id))
}

impl IntegerCell {
    /// Precomputes every rescale of the cell named `prefix`.
    ///
    /// `input` is the scale of the 8-bit codes fed to the cell; the remaining
    /// dynamic scales come from `scales`.
    pub fn build(
        weights: IntegerCellWeights,
        prefix: &str,
        input: QuantParams,
        scales: &ScaleMap,
    ) -> Result<Self, ConvertError> {
        let missing: Vec<String> = crate::calibrate::cell_dynamic_tensors(weights.kind, prefix)
            .into_iter()
            .map(|(id, _)| id)
            .filter(|id| !scales.contains_key(id))
            .collect();
        if !missing.is_empty() {
            return Err(ConvertError::MissingStats(missing));
        }
        let output = lookup(scales, &cell_tensor_id(prefix, "output"), BitWidth::W8)?;
        let proj_in = lookup(scales, &cell_tensor_id(prefix, "proj_input"), BitWidth::W8)?;
        lookup(scales, &cell_tensor_id(prefix, "cell"), BitWidth::W16)?;

        let mut rescale = Vec::with_capacity(weights.gates.len());
        for (g, name) in weights.gates.iter().zip(gate_names(weights.kind)) {
            let id = cell_tensor_id(prefix, &format!("{name}.pre"));
            let pre = lookup(scales, &id, BitWidth::W16)?.scale() as f64;
            let input_m = multiplier(&id, g.input.scale() as f64 * input.scale() as f64 / pre)?;
            let recurrent = match &g.recurrent {
                Some(r) => Some(multiplier(&id, r.scale() as f64 * output.scale() as f64 / pre)?),
                None => None,
            };
            let tail_scale = match &g.tail {
                GateTail::Norm(ln) => ln.output_scale() as f64,
                GateTail::Bias(_) => pre,
            };
            rescale.push(GateRescale { input: input_m, recurrent, to_q3_12: multiplier(&id, tail_scale / q3_12())? });
        }
        let cell_norm_to_q3_12 = match &weights.cell_norm {
            Some(ln) => Some(multiplier(&cell_tensor_id(prefix, "cell"), ln.output_scale() as f64 / q3_12())?),
            None => None,
        };
        let m_frac_bits = match weights.kind {
            CellKind::Sru => M_FRAC_BITS_SRU,
            _ => M_FRAC_BITS_LSTM,
        };
        let m_rescale =
            multiplier(&cell_tensor_id(prefix, "proj_input"), (-(m_frac_bits as f64)).exp2() / proj_in.scale() as f64)?;
        let out_rescale = multiplier(
            &cell_tensor_id(prefix, "output"),
            weights.projection.scale() as f64 * proj_in.scale() as f64 / output.scale() as f64,
        )?;
        let cell = Self { weights, rescale, cell_norm_to_q3_12, m_frac_bits, m_rescale, out_rescale, input, output };
        Ok(cell)
    }

    pub fn weights(&self) -> &IntegerCellWeights {
        &self.weights
    }

    pub fn kind(&self) -> CellKind {
        self.weights.kind
    }

    pub fn input_params(&self) -> QuantParams {
        self.input
    }

    pub fn output_params(&self) -> QuantParams {
        self.output
    }

    pub fn zero_state(&self) -> IntCellState {
        IntCellState { c: vec![0; self.weights.hidden_width()], h: vec![0; self.weights.output_width()] }
    }

    /// Gate pre-activation in Q3.12 (before the nonlinearity).
    fn gate(&self, k: usize, x: &[i8], h: &[i8], scratch: &mut Scratch, out: &mut [i16]) {
        let g = &self.weights.gates[k];
        let r = &self.rescale[k];
        g.input.matvec_i8_into(x, &mut scratch.acc);
        let pre = &mut scratch.pre;
        for (p, &a) in pre.iter_mut().zip(&scratch.acc) {
            *p = r.input.apply(a as i64);
        }
        if let (Some(rw), Some(rm)) = (&g.recurrent, &r.recurrent) {
            rw.matvec_i8_into(h, &mut scratch.acc);
            for (p, &a) in pre.iter_mut().zip(&scratch.acc) {
                *p += rm.apply(a as i64);
            }
        }
        for (s, &p) in scratch.pre16.iter_mut().zip(pre.iter()) {
            *s = BitWidth::W16.saturate(p) as i16;
        }
        match &g.tail {
            GateTail::Norm(ln) => {
                ln.apply_into(&scratch.pre16, &mut scratch.norm, &mut scratch.ln_out);
                for (o, &v) in out.iter_mut().zip(&scratch.ln_out) {
                    *o = BitWidth::W16.saturate(r.to_q3_12.apply(v as i64)) as i16;
                }
            }
            GateTail::Bias(b) => {
                for ((o, &v), &bias) in out.iter_mut().zip(&scratch.pre16).zip(&b.data) {
                    *o = BitWidth::W16.saturate(r.to_q3_12.apply(v as i64) + bias as i64) as i16;
                }
            }
        }
    }

    /// One integer time step. `x` holds 8-bit codes at the cell's input scale.
    pub fn step(&self, x: &[i8], state: &mut IntCellState) -> Result<Vec<i8>, CellError> {
        let w = &self.weights;
        let n = w.hidden_width();
        check(x.len(), w.input_width(), "cell input")?;
        check(state.c.len(), n, "cell state")?;
        check(state.h.len(), w.output_width(), "recurrent state")?;
        let mut scratch = Scratch::new(n);
        let mut g: Vec<Vec<i16>> = vec![vec![0; n]; w.gates.len()];
        for (k, out) in g.iter_mut().enumerate() {
            self.gate(k, x, &state.h, &mut scratch, out);
        }
        let one = Q0_15_ONE as i64;
        let mut m = vec![0i64; n];
        match w.kind {
            CellKind::Lstm | CellKind::Cifg => {
                let (gi, gf, gz, go) = match w.kind {
                    CellKind::Lstm => (Some(&g[0]), &g[1], &g[2], &g[3]),
                    _ => (None, &g[0], &g[1], &g[2]),
                };
                for k in 0..n {
                    let f = fixed_sigmoid(gf[k]) as i64;
                    let i = match gi {
                        Some(gi) => fixed_sigmoid(gi[k]) as i64,
                        None => one - f,
                    };
                    let z = fixed_tanh(gz[k]) as i64;
                    // i·z is Q0.30, f·c is Q3.27; sum at Q3.30, narrow to Q3.12
                    let c = shift_round(i * z + ((f * state.c[k] as i64) << 3), 18);
                    state.c[k] = BitWidth::W16.saturate(c) as i16;
                    let o = fixed_sigmoid(go[k]) as i64;
                    m[k] = shift_round(o * fixed_tanh(state.c[k]) as i64, 15);
                }
            }
            CellKind::Sru => {
                let (gf, gr, x1, x2) = (&g[0], &g[1], &g[2], &g[3]);
                for k in 0..n {
                    let f = fixed_sigmoid(gf[k]) as i64;
                    let c = shift_round(f * state.c[k] as i64 + (one - f) * x1[k] as i64, 15);
                    state.c[k] = BitWidth::W16.saturate(c) as i16;
                }
                let normed = match (&w.cell_norm, &self.cell_norm_to_q3_12) {
                    (Some(ln), Some(to)) => {
                        ln.apply_into(&state.c, &mut scratch.norm, &mut scratch.ln_out);
                        scratch.ln_out.iter().map(|&v| BitWidth::W16.saturate(to.apply(v as i64)) as i16).collect()
                    }
                    _ => state.c.clone(),
                };
                for k in 0..n {
                    let r = fixed_sigmoid(gr[k]) as i64;
                    let t = fixed_tanh(normed[k]) as i64;
                    // r·t is Q0.30, (1-r)·x2 is Q3.27; sum at Q3.30, narrow to Q3.12
                    let v = shift_round(r * t + (((one - r) * x2[k] as i64) << 3), 18);
                    m[k] = BitWidth::W16.saturate(v);
                }
            }
        }
        let m8: Vec<i8> = m.iter().map(|&v| self.m_rescale.requantize(v, BitWidth::W8) as i8).collect();
        let mut acc = vec![0i32; w.output_width()];
        w.projection.matvec_i8_into(&m8, &mut acc);
        let h: Vec<i8> = acc.iter().map(|&a| self.out_rescale.requantize(a as i64, BitWidth::W8) as i8).collect();
        state.h.clone_from(&h);
        Ok(h)
    }

    /// Fractional bits of the cell output `m` before its 8-bit narrowing.
    pub fn m_frac_bits(&self) -> u32 {
        self.m_frac_bits
    }
}

fn check(actual: usize, expected: usize, what: &str) -> Result<(), CellError> {
    if actual == expected {
        Ok(())
    } else {
        Err(CellError::Dimension { what: what.to_string(), expected, actual })
    }
}

struct Scratch {
    acc: Vec<i32>,
    pre: Vec<i64>,
    pre16: Vec<i16>,
    norm: Vec<i32>,
    ln_out: Vec<i16>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self { acc: vec![0; n], pre: vec![0; n], pre16: vec![0; n], norm: vec![0; n], ln_out: vec![0; n] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::{cell_dynamic_tensors, RangeObserver};
    use crate::cells::{CellDims, CellState, Probe};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Prefixed<'a>(&'a mut RangeObserver, &'a str);

    impl Probe for Prefixed<'_> {
        fn record(&mut self, name: &'static str, values: &[f32]) {
            self.0.observe(&cell_tensor_id(self.1, name), values).unwrap();
        }
    }

    fn calibrated(cell: &Cell<Linear>, inputs: &[Vec<f32>]) -> (IntegerCell, QuantParams) {
        let mut obs = RangeObserver::new();
        for (id, bits) in cell_dynamic_tensors(cell.kind(), "l") {
            obs.register(&id, bits);
        }
        obs.register("x", BitWidth::W8);
        let mut s = cell.zero_state();
        for x in inputs {
            obs.observe("x", x).unwrap();
            cell.step_in_place(x, &mut s, &mut Prefixed(&mut obs, "l")).unwrap();
        }
        let scales = obs.finalize().unwrap();
        let input = scales["x"];
        let w = quantize_cell_weights(cell).unwrap();
        (IntegerCell::build(w, "l", input, &scales).unwrap(), input)
    }

    #[test]
    fn zero_cell_outputs_zero() {
        for kind in [CellKind::Lstm, CellKind::Cifg, CellKind::Sru] {
            let cell = Cell::zeros(CellDims { kind, input: 3, hidden: 4, output: 2, layer_norm: true });
            let xs = vec![vec![1.0, -2.0, 0.5]; 3];
            let (ic, input) = calibrated(&cell, &xs);
            let mut s = ic.zero_state();
            for x in &xs {
                let xq: Vec<i8> = x.iter().map(|&v| input.quantize_value(v) as i8).collect();
                assert_eq!(ic.step(&xq, &mut s).unwrap(), vec![0, 0]);
            }
            assert!(s.c.iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn missing_stats_are_named() {
        let cell = Cell::zeros(CellDims { kind: CellKind::Lstm, input: 1, hidden: 1, output: 1, layer_norm: false });
        let w = quantize_cell_weights(&cell).unwrap();
        let p = QuantParams::new(1.0, BitWidth::W8).unwrap();
        match IntegerCell::build(w, "enc", p, &ScaleMap::new()) {
            Err(ConvertError::MissingStats(ids)) => assert!(ids.contains(&"enc.output".to_string())),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn integer_cell_tracks_float_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst = 0.0f32;
        for case in 0..30 {
            let kind = [CellKind::Lstm, CellKind::Cifg, CellKind::Sru][case % 3];
            let cell =
                Cell::random(CellDims { kind, input: 4, hidden: 8, output: 4, layer_norm: case % 2 == 0 }, &mut rng);
            let xs: Vec<Vec<f32>> = (0..20).map(|_| (0..4).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).collect();
            let (ic, input) = calibrated(&cell, &xs);
            let mut sf = CellState::zeros(8, 4);
            let mut si = ic.zero_state();
            for x in &xs {
                let hf = cell.step(x, &sf).unwrap();
                sf = hf.1;
                let xq: Vec<i8> = x.iter().map(|&v| input.quantize_value(v) as i8).collect();
                let hi = ic.step(&xq, &mut si).unwrap();
                for (a, &b) in hf.0.iter().zip(&hi) {
                    worst = worst.max((a - b as f32 * ic.output_params().scale()).abs());
                }
            }
        }
        assert!(worst <= 0.05, "worst {worst}");
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cell =
            Cell::random(CellDims { kind: CellKind::Lstm, input: 4, hidden: 8, output: 4, layer_norm: true }, &mut rng);
        let xs: Vec<Vec<f32>> = (0..10).map(|_| (0..4).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).collect();
        let (ic, input) = calibrated(&cell, &xs);
        let run = || {
            let mut s = ic.zero_state();
            let mut out = Vec::new();
            for x in &xs {
                let xq: Vec<i8> = x.iter().map(|&v| input.quantize_value(v) as i8).collect();
                out.extend(ic.step(&xq, &mut s).unwrap());
            }
            (out, s)
        };
        assert_eq!(run(), run());
    }
}
