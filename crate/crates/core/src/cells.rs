//! Float reference implementations of the LSTM, CIFG and SRU cells.
//!
//! These are the ground truth for every quantized path. Cells are generic over
//! the matrix type, so the hybrid scheme reuses the exact same dataflow with
//! 8-bit matrices substituted in.
//!
//! Gate pre-activations are `W x + R h`; with layer normalization enabled the
//! sum is normalized, scaled by the gain, and then the (fused) bias is added
//! before the nonlinearity. Without normalization the bias is added directly.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linear::{Linear, MatVec};
use crate::matrix::Matrix;

/// Variance floor of the float layer normalization.
pub const LN_EPSILON: f32 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CellError {
    #[error("{what}: expected {expected}, got {actual}")]
    Dimension { what: String, expected: usize, actual: usize },

    #[error("non-finite activation in {tensor} (layer {layer}, step {step})")]
    NonFinite { tensor: &'static str, layer: String, step: usize },
}

impl CellError {
    fn dim(what: impl Into<String>, expected: usize, actual: usize) -> Result<(), CellError> {
        if expected == actual {
            Ok(())
        } else {
            Err(CellError::Dimension { what: what.into(), expected, actual })
        }
    }

    /// Attaches a step index to a non-finite error.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            CellError::NonFinite { tensor, layer, .. } => CellError::NonFinite { tensor, layer, step },
            other => other,
        }
    }

    /// Attaches a layer name to a non-finite error.
    pub fn in_layer(self, name: &str) -> Self {
        match self {
            CellError::NonFinite { tensor, step, .. } => CellError::NonFinite { tensor, layer: name.to_string(), step },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Cifg,
    Sru,
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Lstm => "lstm",
            CellKind::Cifg => "cifg",
            CellKind::Sru => "sru",
        })
    }
}

/// Receives intermediate tensors during a step (used for calibration).
pub trait Probe {
    fn record(&mut self, name: &'static str, values: &[f32]);
}

/// A probe that discards everything.
pub struct NoProbe;

impl Probe for NoProbe {
    #[inline]
    fn record(&mut self, _: &'static str, _: &[f32]) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
    pub epsilon: f32,
    pub enabled: bool,
}

impl LayerNormParams {
    pub fn identity(n: usize) -> Self {
        Self { gain: vec![1.0; n], bias: vec![0.0; n], epsilon: LN_EPSILON, enabled: true }
    }

    pub fn disabled(n: usize) -> Self {
        Self { enabled: false, ..Self::identity(n) }
    }
}

/// Population mean and variance, accumulated in f64.
pub(crate) fn mean_var(x: &[f32]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn normalize_into(x: &mut [f32], gain: &[f32], bias: &[f32], epsilon: f32) {
    if x.is_empty() {
        return;
    }
    let (mean, var) = mean_var(x);
    let inv = 1.0 / (var + epsilon as f64).sqrt();
    for ((v, g), b) in x.iter_mut().zip(gain).zip(bias) {
        *v = (*g as f64 * (*v as f64 - mean) * inv + *b as f64) as f32;
    }
}

/// `gain ⊙ (x − mean) / sqrt(var + ε) + bias`, or `x` unchanged when disabled.
pub fn layer_norm(x: &[f32], p: &LayerNormParams) -> Vec<f32> {
    let mut y = x.to_vec();
    if p.enabled {
        normalize_into(&mut y, &p.gain, &p.bias, p.epsilon);
    }
    y
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// One gate (or linear branch): `act(LN(W x + R h) + b)` before the nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate<L> {
    pub input: L,
    pub recurrent: Option<L>,
    pub bias: Vec<f32>,
    /// Layer-norm gain; the layer-norm bias is `bias`.
    pub norm_gain: Option<Vec<f32>>,
}

impl<L: MatVec> Gate<L> {
    pub fn width(&self) -> usize {
        self.input.rows()
    }

    /// Raw `W x + R h`, before normalization and bias.
    pub fn linear_sum(&self, x: &[f32], h: &[f32]) -> Vec<f32> {
        let mut pre = vec![0.0; self.input.rows()];
        self.input.matvec_into(x, &mut pre);
        if let Some(r) = &self.recurrent {
            let mut rec = vec![0.0; r.rows()];
            r.matvec_into(h, &mut rec);
            for (p, v) in pre.iter_mut().zip(&rec) {
                *p += v;
            }
        }
        pre
    }

    /// Pre-activation, recording the raw sum under `name`.
    pub fn preactivation<P: Probe>(&self, x: &[f32], h: &[f32], name: &'static str, probe: &mut P) -> Vec<f32> {
        let mut pre = self.linear_sum(x, h);
        probe.record(name, &pre);
        match &self.norm_gain {
            Some(gain) => normalize_into(&mut pre, gain, &self.bias, LN_EPSILON),
            None => pre.iter_mut().zip(&self.bias).for_each(|(p, b)| *p += b),
        }
        pre
    }

    fn validate(&self, what: &str, input: usize, hidden: usize, recurrent: Option<usize>) -> Result<(), CellError> {
        CellError::dim(format!("{what} input rows"), hidden, self.input.rows())?;
        CellError::dim(format!("{what} input cols"), input, self.input.cols())?;
        match (&self.recurrent, recurrent) {
            (Some(r), Some(out)) => {
                CellError::dim(format!("{what} recurrent rows"), hidden, r.rows())?;
                CellError::dim(format!("{what} recurrent cols"), out, r.cols())?;
            }
            (None, None) => {}
            (Some(_), None) => CellError::dim(format!("{what} recurrent matrix count"), 0, 1)?,
            (None, Some(_)) => CellError::dim(format!("{what} recurrent matrix count"), 1, 0)?,
        }
        CellError::dim(format!("{what} bias"), hidden, self.bias.len())?;
        if let Some(g) = &self.norm_gain {
            CellError::dim(format!("{what} norm gain"), hidden, g.len())?;
        }
        Ok(())
    }

    pub fn try_map<M, E>(&self, f: &mut impl FnMut(MatrixRole, &L) -> Result<M, E>) -> Result<Gate<M>, E> {
        Ok(Gate {
            input: f(MatrixRole::Input, &self.input)?,
            recurrent: match &self.recurrent {
                Some(r) => Some(f(MatrixRole::Recurrent, r)?),
                None => None,
            },
            bias: self.bias.clone(),
            norm_gain: self.norm_gain.clone(),
        })
    }

    fn stored_params(&self) -> usize {
        self.input.stored_params()
            + self.recurrent.as_ref().map_or(0, |r| r.stored_params())
            + self.bias.len()
            + self.norm_gain.as_ref().map_or(0, |g| g.len())
    }
}

/// Which role a matrix plays inside a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixRole {
    Input,
    Recurrent,
    Projection,
}

impl MatrixRole {
    /// Input and recurrent matrices are subject to pruning; projections are not.
    pub fn is_prunable(self) -> bool {
        matches!(self, MatrixRole::Input | MatrixRole::Recurrent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights<L> {
    pub input_gate: Gate<L>,
    pub forget_gate: Gate<L>,
    pub cell_input: Gate<L>,
    pub output_gate: Gate<L>,
    pub projection: L,
}

/// LSTM with the input gate tied to `1 − f`.
#[derive(Debug, Clone, PartialEq)]
pub struct CifgWeights<L> {
    pub forget_gate: Gate<L>,
    pub cell_input: Gate<L>,
    pub output_gate: Gate<L>,
    pub projection: L,
}

/// Simple recurrent unit: every gate depends on the current input only.
#[derive(Debug, Clone, PartialEq)]
pub struct SruWeights<L> {
    pub forget_gate: Gate<L>,
    pub reset_gate: Gate<L>,
    /// Linear branch mixed into the cell state.
    pub x1: Gate<L>,
    /// Highway branch mixed into the output.
    pub x2: Gate<L>,
    pub cell_norm: Option<LayerNormParams>,
    pub projection: L,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell<L> {
    Lstm(LstmWeights<L>),
    Cifg(CifgWeights<L>),
    Sru(SruWeights<L>),
}

/// Recurrent state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub c: Vec<f32>,
    /// Previous output; unused by the SRU, which has no recurrent matrices.
    pub h: Vec<f32>,
}

impl CellState {
    pub fn zeros(hidden: usize, output: usize) -> Self {
        Self { c: vec![0.0; hidden], h: vec![0.0; output] }
    }
}

fn check_finite(v: &[f32], tensor: &'static str) -> Result<(), CellError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CellError::NonFinite { tensor, layer: String::new(), step: 0 })
    }
}

impl<L: MatVec> Cell<L> {
    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Lstm(_) => CellKind::Lstm,
            Cell::Cifg(_) => CellKind::Cifg,
            Cell::Sru(_) => CellKind::Sru,
        }
    }

    fn first_gate(&self) -> &Gate<L> {
        match self {
            Cell::Lstm(w) => &w.forget_gate,
            Cell::Cifg(w) => &w.forget_gate,
            Cell::Sru(w) => &w.forget_gate,
        }
    }

    pub fn projection(&self) -> &L {
        match self {
            Cell::Lstm(w) => &w.projection,
            Cell::Cifg(w) => &w.projection,
            Cell::Sru(w) => &w.projection,
        }
    }

    pub fn input_width(&self) -> usize {
        self.first_gate().input.cols()
    }

    pub fn hidden_width(&self) -> usize {
        self.first_gate().width()
    }

    pub fn output_width(&self) -> usize {
        self.projection().rows()
    }

    pub fn layer_norm_enabled(&self) -> bool {
        self.first_gate().norm_gain.is_some()
    }

    pub fn zero_state(&self) -> CellState {
        CellState::zeros(self.hidden_width(), self.output_width())
    }

    /// Gates in a fixed order with their canonical names.
    pub fn gates(&self) -> Vec<(&'static str, &Gate<L>)> {
        match self {
            Cell::Lstm(w) => vec![
                ("input_gate", &w.input_gate),
                ("forget_gate", &w.forget_gate),
                ("cell_input", &w.cell_input),
                ("output_gate", &w.output_gate),
            ],
            Cell::Cifg(w) => {
                vec![("forget_gate", &w.forget_gate), ("cell_input", &w.cell_input), ("output_gate", &w.output_gate)]
            }
            Cell::Sru(w) => {
                vec![("forget_gate", &w.forget_gate), ("reset_gate", &w.reset_gate), ("x1", &w.x1), ("x2", &w.x2)]
            }
        }
    }

    pub fn validate(&self) -> Result<(), CellError> {
        let (input, hidden, output) = (self.input_width(), self.hidden_width(), self.output_width());
        let rec = match self {
            Cell::Sru(_) => None,
            _ => Some(output),
        };
        for (name, g) in self.gates() {
            g.validate(name, input, hidden, rec)?;
        }
        if let Cell::Sru(w) = self {
            for (name, g) in [("x1", &w.x1), ("x2", &w.x2)] {
                if g.norm_gain.is_some() {
                    return Err(CellError::Dimension {
                        what: format!("{name} norm gain (linear branches are not normalized)"),
                        expected: 0,
                        actual: hidden,
                    });
                }
            }
            if let Some(n) = &w.cell_norm {
                CellError::dim("cell norm gain", hidden, n.gain.len())?;
                CellError::dim("cell norm bias", hidden, n.bias.len())?;
            }
        }
        CellError::dim("projection cols", hidden, self.projection().cols())?;
        Ok(())
    }

    /// Parameters stored by this cell (pruned blocks excluded).
    pub fn stored_params(&self) -> usize {
        let gates: usize = self.gates().iter().map(|(_, g)| g.stored_params()).sum();
        let norm = match self {
            Cell::Sru(w) => w.cell_norm.as_ref().map_or(0, |n| n.gain.len() + n.bias.len()),
            _ => 0,
        };
        gates + norm + self.projection().stored_params()
    }

    /// One time step. Returns the output and the new state.
    pub fn step(&self, x: &[f32], state: &CellState) -> Result<(Vec<f32>, CellState), CellError> {
        let mut s = state.clone();
        let h = self.step_in_place(x, &mut s, &mut NoProbe)?;
        Ok((h, s))
    }

    /// One time step updating `state`, reporting intermediates to `probe`.
    pub fn step_in_place<P: Probe>(
        &self,
        x: &[f32],
        state: &mut CellState,
        probe: &mut P,
    ) -> Result<Vec<f32>, CellError> {
        CellError::dim("cell input", self.input_width(), x.len())?;
        CellError::dim("cell state", self.hidden_width(), state.c.len())?;
        let m = match self {
            Cell::Lstm(w) => {
                CellError::dim("recurrent state", self.output_width(), state.h.len())?;
                let i = w.input_gate.preactivation(x, &state.h, "input_gate.pre", probe);
                let f = w.forget_gate.preactivation(x, &state.h, "forget_gate.pre", probe);
                let z = w.cell_input.preactivation(x, &state.h, "cell_input.pre", probe);
                let o = w.output_gate.preactivation(x, &state.h, "output_gate.pre", probe);
                for k in 0..state.c.len() {
                    state.c[k] = sigmoid(i[k]) * z[k].tanh() + sigmoid(f[k]) * state.c[k];
                }
                probe.record("cell", &state.c);
                (0..state.c.len()).map(|k| sigmoid(o[k]) * state.c[k].tanh()).collect::<Vec<_>>()
            }
            Cell::Cifg(w) => {
                CellError::dim("recurrent state", self.output_width(), state.h.len())?;
                let f = w.forget_gate.preactivation(x, &state.h, "forget_gate.pre", probe);
                let z = w.cell_input.preactivation(x, &state.h, "cell_input.pre", probe);
                let o = w.output_gate.preactivation(x, &state.h, "output_gate.pre", probe);
                for k in 0..state.c.len() {
                    let fk = sigmoid(f[k]);
                    state.c[k] = (1.0 - fk) * z[k].tanh() + fk * state.c[k];
                }
                probe.record("cell", &state.c);
                (0..state.c.len()).map(|k| sigmoid(o[k]) * state.c[k].tanh()).collect::<Vec<_>>()
            }
            Cell::Sru(w) => {
                let f = w.forget_gate.preactivation(x, &[], "forget_gate.pre", probe);
                let r = w.reset_gate.preactivation(x, &[], "reset_gate.pre", probe);
                let x1 = w.x1.preactivation(x, &[], "x1.pre", probe);
                let x2 = w.x2.preactivation(x, &[], "x2.pre", probe);
                for k in 0..state.c.len() {
                    let fk = sigmoid(f[k]);
                    state.c[k] = fk * state.c[k] + (1.0 - fk) * x1[k];
                }
                probe.record("cell", &state.c);
                let mut g = state.c.clone();
                if let Some(n) = &w.cell_norm {
                    if n.enabled {
                        normalize_into(&mut g, &n.gain, &n.bias, n.epsilon);
                    }
                }
                (0..g.len())
                    .map(|k| {
                        let rk = sigmoid(r[k]);
                        rk * g[k].tanh() + (1.0 - rk) * x2[k]
                    })
                    .collect::<Vec<_>>()
            }
        };
        probe.record("proj_input", &m);
        let mut h = vec![0.0; self.output_width()];
        self.projection().matvec_into(&m, &mut h);
        probe.record("output", &h);
        check_finite(&state.c, "cell")?;
        check_finite(&h, "output")?;
        state.h.clone_from(&h);
        Ok(h)
    }

    /// Left-to-right fold of `step` over `inputs`.
    pub fn run_sequence(&self, inputs: &[Vec<f32>], init: &CellState) -> Result<Vec<Vec<f32>>, CellError> {
        let mut state = init.clone();
        inputs
            .iter()
            .enumerate()
            .map(|(t, x)| self.step_in_place(x, &mut state, &mut NoProbe).map_err(|e| e.at_step(t)))
            .collect()
    }

    /// Rebuilds the cell with every matrix passed through `f`.
    pub fn try_map<M, E>(&self, mut f: impl FnMut(MatrixRole, &L) -> Result<M, E>) -> Result<Cell<M>, E> {
        Ok(match self {
            Cell::Lstm(w) => Cell::Lstm(LstmWeights {
                input_gate: w.input_gate.try_map(&mut f)?,
                forget_gate: w.forget_gate.try_map(&mut f)?,
                cell_input: w.cell_input.try_map(&mut f)?,
                output_gate: w.output_gate.try_map(&mut f)?,
                projection: f(MatrixRole::Projection, &w.projection)?,
            }),
            Cell::Cifg(w) => Cell::Cifg(CifgWeights {
                forget_gate: w.forget_gate.try_map(&mut f)?,
                cell_input: w.cell_input.try_map(&mut f)?,
                output_gate: w.output_gate.try_map(&mut f)?,
                projection: f(MatrixRole::Projection, &w.projection)?,
            }),
            Cell::Sru(w) => Cell::Sru(SruWeights {
                forget_gate: w.forget_gate.try_map(&mut f)?,
                reset_gate: w.reset_gate.try_map(&mut f)?,
                x1: w.x1.try_map(&mut f)?,
                x2: w.x2.try_map(&mut f)?,
                cell_norm: w.cell_norm.clone(),
                projection: f(MatrixRole::Projection, &w.projection)?,
            }),
        })
    }
}

/// Shape of a cell to initialize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellDims {
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub layer_norm: bool,
}

fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f32) -> Linear {
    Linear::Dense(Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound)))
}

fn random_gate<R: Rng>(rng: &mut R, d: &CellDims, recurrent: bool, normalized: bool, bias_center: f32) -> Gate<Linear> {
    let fan_in = d.input + if recurrent { d.output } else { 0 };
    let bound = 1.0 / (fan_in as f32).sqrt();
    Gate {
        input: uniform_matrix(rng, d.hidden, d.input, bound),
        recurrent: recurrent.then(|| uniform_matrix(rng, d.hidden, d.output, bound)),
        bias: (0..d.hidden).map(|_| bias_center + rng.gen_range(-0.1..=0.1)).collect(),
        norm_gain: normalized.then(|| (0..d.hidden).map(|_| rng.gen_range(0.8..=1.2)).collect()),
    }
}

impl Cell<Linear> {
    /// Uniform `±1/sqrt(fan_in)` weights, small biases (forget gate biased open),
    /// layer-norm gains near one.
    pub fn random<R: Rng>(d: CellDims, rng: &mut R) -> Self {
        let ln = d.layer_norm;
        let proj_bound = 1.0 / (d.hidden as f32).sqrt();
        match d.kind {
            CellKind::Lstm => Cell::Lstm(LstmWeights {
                input_gate: random_gate(rng, &d, true, ln, 0.0),
                forget_gate: random_gate(rng, &d, true, ln, 1.0),
                cell_input: random_gate(rng, &d, true, ln, 0.0),
                output_gate: random_gate(rng, &d, true, ln, 0.0),
                projection: uniform_matrix(rng, d.output, d.hidden, proj_bound),
            }),
            CellKind::Cifg => Cell::Cifg(CifgWeights {
                forget_gate: random_gate(rng, &d, true, ln, 1.0),
                cell_input: random_gate(rng, &d, true, ln, 0.0),
                output_gate: random_gate(rng, &d, true, ln, 0.0),
                projection: uniform_matrix(rng, d.output, d.hidden, proj_bound),
            }),
            CellKind::Sru => Cell::Sru(SruWeights {
                forget_gate: random_gate(rng, &d, false, ln, 1.0),
                reset_gate: random_gate(rng, &d, false, ln, 0.0),
                x1: random_gate(rng, &d, false, false, 0.0),
                x2: random_gate(rng, &d, false, false, 0.0),
                cell_norm: ln.then(|| LayerNormParams {
                    gain: (0..d.hidden).map(|_| rng.gen_range(0.8..=1.2)).collect(),
                    bias: (0..d.hidden).map(|_| rng.gen_range(-0.1..=0.1)).collect(),
                    epsilon: LN_EPSILON,
                    enabled: true,
                }),
                projection: uniform_matrix(rng, d.output, d.hidden, proj_bound),
            }),
        }
    }

    /// All-zero parameters (layer norm, if any, with unit gain).
    pub fn zeros(d: CellDims) -> Self {
        let gate = |recurrent: bool, normalized: bool| Gate {
            input: Linear::Dense(Matrix::zeros(d.hidden, d.input)),
            recurrent: recurrent.then(|| Linear::Dense(Matrix::zeros(d.hidden, d.output))),
            bias: vec![0.0; d.hidden],
            norm_gain: normalized.then(|| vec![1.0; d.hidden]),
        };
        let ln = d.layer_norm;
        let projection = Linear::Dense(Matrix::zeros(d.output, d.hidden));
        match d.kind {
            CellKind::Lstm => Cell::Lstm(LstmWeights {
                input_gate: gate(true, ln),
                forget_gate: gate(true, ln),
                cell_input: gate(true, ln),
                output_gate: gate(true, ln),
                projection,
            }),
            CellKind::Cifg => Cell::Cifg(CifgWeights {
                forget_gate: gate(true, ln),
                cell_input: gate(true, ln),
                output_gate: gate(true, ln),
                projection,
            }),
            CellKind::Sru => Cell::Sru(SruWeights {
                forget_gate: gate(false, ln),
                reset_gate: gate(false, ln),
                x1: gate(false, false),
                x2: gate(false, false),
                cell_norm: ln.then(|| LayerNormParams::identity(d.hidden)),
                projection,
            }),
        }
    }
}
