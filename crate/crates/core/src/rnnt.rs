//! RNN-T model: encoder stack, prediction network with token embedding, additive
//! joint network, and greedy decoding.
//!
//! A model is float, hybrid or integer. Float and hybrid share one
//! implementation (the cells are generic over the matrix type); the integer
//! model runs the encoder and prediction network on integer cells and the
//! joint network hybrid-style on their dequantized outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::blocksparse::BlockShape;
use crate::calibrate::{cell_dynamic_tensors, CalibrationError, RangeObserver, ScaleMap};
use crate::cells::{Cell, CellDims, CellError, CellKind, CellState, MatrixRole, NoProbe, Probe};
use crate::fixedpoint::{quantize_symmetric, BitWidth, QuantError, QuantParams};
use crate::linear::{Linear, MatVec};
use crate::matrix::Matrix;
use crate::modelio::{count_params, TopologyConfig, TopologyError};
use crate::pruning::{prune_to_block_sparse, PruningError};
use crate::quant::{
    convert_cell_to_hybrid, quantize_cell_weights, ConvertError, GateTail, IntCellState, IntegerCell,
    IntegerCellWeights, QLinear,
};

/// Token id of the blank symbol.
pub const BLANK: u32 = 0;
/// Default bound on symbols emitted per encoder frame.
pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 10;
/// Named per-layer outputs, one vector per time step.
pub type LayerTrace = Vec<(String, Vec<Vec<f32>>)>;

/// Id of the encoder-input tensor in calibration stats.
pub const ENCODER_INPUT: &str = "encoder.input";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Topology(#[from] TopologyError),

    #[error("{what}: expected width {expected}, got {actual}")]
    Width { what: String, expected: usize, actual: usize },

    #[error("{layer}: {source}")]
    Cell {
        layer: String,
        #[source]
        source: CellError,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Convert(#[from] ConvertError),

    #[error(transparent)]
    Quant(#[from] QuantError),

    #[error(transparent)]
    Calibration(#[from] CalibrationError),

    #[error(transparent)]
    Pruning(#[from] PruningError),

    #[error("operation requires a {expected} model, this one is {actual}")]
    Mode { expected: QuantMode, actual: QuantMode },

    #[error("token {token} outside vocabulary of {vocab}")]
    Token { token: u32, vocab: usize },
}

impl ModelError {
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ModelError::NonFinite(_)
                | ModelError::Cell { source: CellError::NonFinite { .. }, .. }
                | ModelError::Calibration(CalibrationError::NonFinite { .. })
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    Float32,
    Hybrid8,
    Integer8_16,
}

impl QuantMode {
    pub fn tag(self) -> &'static str {
        match self {
            QuantMode::Float32 => "float32",
            QuantMode::Hybrid8 => "hybrid8",
            QuantMode::Integer8_16 => "integer8_16",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        [QuantMode::Float32, QuantMode::Hybrid8, QuantMode::Integer8_16].into_iter().find(|m| m.tag() == s)
    }
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Token embedding table, `vocab × width`.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    Float(Matrix<f32>),
    Quantized { table: Matrix<i8>, params: QuantParams },
}

impl Embedding {
    pub fn vocab(&self) -> usize {
        match self {
            Embedding::Float(m) => m.rows(),
            Embedding::Quantized { table, .. } => table.rows(),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Embedding::Float(m) => m.cols(),
            Embedding::Quantized { table, .. } => table.cols(),
        }
    }

    pub fn lookup(&self, token: u32) -> Vec<f32> {
        match self {
            Embedding::Float(m) => m.row(token as usize).to_vec(),
            Embedding::Quantized { table, params } => {
                table.row(token as usize).iter().map(|&q| q as f32 * params.scale()).collect()
            }
        }
    }

    pub fn quantize(&self) -> Result<Embedding, QuantError> {
        match self {
            Embedding::Float(m) => {
                let q = quantize_symmetric(m.as_slice(), BitWidth::W8)?;
                let data = q.data.iter().map(|&v| v as i8).collect();
                Ok(Embedding::Quantized {
                    table: Matrix::from_vec(m.rows(), m.cols(), data).expect("same shape"),
                    params: q.params,
                })
            }
            q => Ok(q.clone()),
        }
    }
}

/// `logits = W_out · tanh(P_enc · enc + P_pred · pred + b) + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint<L> {
    pub enc_proj: L,
    pub pred_proj: L,
    pub bias: Vec<f32>,
    pub output: L,
    pub output_bias: Vec<f32>,
}

impl<L: MatVec> Joint<L> {
    fn stored_params(&self) -> usize {
        self.enc_proj.stored_params()
            + self.pred_proj.stored_params()
            + self.bias.len()
            + self.output.stored_params()
            + self.output_bias.len()
    }

    /// `P_enc · enc + b`, computed once per encoder frame.
    pub fn project_encoder(&self, enc: &[f32]) -> Vec<f32> {
        let mut y = vec![0.0; self.enc_proj.rows()];
        self.enc_proj.matvec_into(enc, &mut y);
        y.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        y
    }

    /// `P_pred · pred`, computed once per prediction-network step.
    pub fn project_prediction(&self, pred: &[f32]) -> Vec<f32> {
        let mut y = vec![0.0; self.pred_proj.rows()];
        self.pred_proj.matvec_into(pred, &mut y);
        y
    }

    pub fn logits(&self, enc_projected: &[f32], pred_projected: &[f32]) -> Vec<f32> {
        let hidden: Vec<f32> = enc_projected.iter().zip(pred_projected).map(|(a, b)| (a + b).tanh()).collect();
        let mut y = vec![0.0; self.output.rows()];
        self.output.matvec_into(&hidden, &mut y);
        y.iter_mut().zip(&self.output_bias).for_each(|(v, b)| *v += b);
        y
    }

    pub fn try_map<M, E>(&self, mut f: impl FnMut(&L) -> Result<M, E>) -> Result<Joint<M>, E> {
        Ok(Joint {
            enc_proj: f(&self.enc_proj)?,
            pred_proj: f(&self.pred_proj)?,
            bias: self.bias.clone(),
            output: f(&self.output)?,
            output_bias: self.output_bias.clone(),
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Float or hybrid layer stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<L> {
    pub encoder: Vec<Cell<L>>,
    pub prediction: Vec<Cell<L>>,
    pub joint: Joint<L>,
}

/// Integer layer stacks with the calibrated scales they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerNetwork {
    pub encoder: Vec<IntegerCell>,
    pub prediction: Vec<IntegerCell>,
    pub joint: Joint<QLinear>,
    pub scales: ScaleMap,
}

impl IntegerNetwork {
    /// Builds every integer cell, chaining input scales from layer to layer.
    pub fn build(
        encoder: Vec<IntegerCellWeights>,
        prediction: Vec<IntegerCellWeights>,
        embedding: QuantParams,
        joint: Joint<QLinear>,
        scales: ScaleMap,
    ) -> Result<Self, ConvertError> {
        let missing: Vec<String> =
            std::iter::once(ENCODER_INPUT.to_string()).filter(|id| !scales.contains_key(id)).collect();
        if !missing.is_empty() {
            return Err(ConvertError::MissingStats(missing));
        }
        let chain = |weights: Vec<IntegerCellWeights>, stack: &str, first: QuantParams| {
            let mut input = first;
            let mut cells = Vec::with_capacity(weights.len());
            for (i, w) in weights.into_iter().enumerate() {
                let cell = IntegerCell::build(w, &format!("{stack}.{i}"), input, &scales)?;
                input = cell.output_params();
                cells.push(cell);
            }
            Ok::<_, ConvertError>(cells)
        };
        let encoder = chain(encoder, "encoder", scales[ENCODER_INPUT])?;
        let prediction = chain(prediction, "prediction", embedding)?;
        Ok(Self { encoder, prediction, joint, scales })
    }

    pub fn input_params(&self) -> QuantParams {
        self.scales[ENCODER_INPUT]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Float(Network<Linear>),
    Hybrid(Network<QLinear>),
    Integer(IntegerNetwork),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    topology: TopologyConfig,
    embedding: Embedding,
    weights: Weights,
}

/// Every dynamic tensor the integer model needs a scale for, with its width.
pub fn model_dynamic_tensors(t: &TopologyConfig) -> Vec<(String, BitWidth)> {
    let mut v = vec![(ENCODER_INPUT.to_string(), BitWidth::W8)];
    for (name, l) in t.named_layers() {
        v.extend(cell_dynamic_tensors(l.cell, &name));
    }
    v
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f32) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

struct LayerProbe<'a> {
    obs: &'a mut RangeObserver,
    layer: &'a str,
    error: Option<CalibrationError>,
}

impl Probe for LayerProbe<'_> {
    fn record(&mut self, name: &'static str, values: &[f32]) {
        if self.error.is_none() {
            if let Err(e) = self.obs.observe(&format!("{}.{name}", self.layer), values) {
                self.error = Some(e);
            }
        }
    }
}

/// Concatenates groups of `factor` frames; a trailing partial group is zero-padded.
pub fn stack_frames<T: Copy + Default>(seq: &[Vec<T>], factor: usize) -> Vec<Vec<T>> {
    if factor <= 1 {
        return seq.to_vec();
    }
    let width = seq.first().map_or(0, |f| f.len());
    seq.chunks(factor)
        .map(|group| {
            let mut out = Vec::with_capacity(width * factor);
            for f in group {
                out.extend_from_slice(f);
            }
            out.resize(width * factor, T::default());
            out
        })
        .collect()
}

/// Recurrent state of the prediction network.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionState {
    Float(Vec<CellState>),
    Integer(Vec<IntCellState>),
}

fn cell_err(layer: &str, t: usize) -> impl Fn(CellError) -> ModelError + '_ {
    move |e| ModelError::Cell { layer: layer.to_string(), source: e.at_step(t).in_layer(layer) }
}

fn run_float_stack<L: MatVec>(
    cells: &[Cell<L>],
    stack: &str,
    topology: &TopologyConfig,
    mut seq: Vec<Vec<f32>>,
    mut obs: Option<&mut RangeObserver>,
    mut per_layer: Option<&mut LayerTrace>,
) -> Result<Vec<Vec<f32>>, ModelError> {
    for (i, cell) in cells.iter().enumerate() {
        if stack == "encoder" {
            seq = stack_frames(&seq, topology.stacking_before(i));
        }
        let name = format!("{stack}.{i}");
        let mut state = cell.zero_state();
        let mut out = Vec::with_capacity(seq.len());
        for (t, x) in seq.iter().enumerate() {
            let h = match obs.as_deref_mut() {
                Some(o) => {
                    let mut p = LayerProbe { obs: o, layer: &name, error: None };
                    let h = cell.step_in_place(x, &mut state, &mut p);
                    if let Some(e) = p.error {
                        return Err(e.into());
                    }
                    h
                }
                None => cell.step_in_place(x, &mut state, &mut NoProbe),
            }
            .map_err(cell_err(&name, t))?;
            out.push(h);
        }
        seq = out;
        if let Some(v) = per_layer.as_deref_mut() {
            v.push((name, seq.clone()));
        }
    }
    Ok(seq)
}

fn run_int_stack(
    cells: &[IntegerCell],
    stack: &str,
    topology: &TopologyConfig,
    mut seq: Vec<Vec<i8>>,
    mut per_layer: Option<&mut LayerTrace>,
) -> Result<Vec<Vec<i8>>, ModelError> {
    for (i, cell) in cells.iter().enumerate() {
        if stack == "encoder" {
            seq = stack_frames(&seq, topology.stacking_before(i));
        }
        let name = format!("{stack}.{i}");
        let mut state = cell.zero_state();
        let mut out = Vec::with_capacity(seq.len());
        for (t, x) in seq.iter().enumerate() {
            out.push(cell.step(x, &mut state).map_err(cell_err(&name, t))?);
        }
        seq = out;
        if let Some(v) = per_layer.as_deref_mut() {
            let s = cell.output_params().scale();
            v.push((name, seq.iter().map(|h| dequantize_i8(h, s)).collect()));
        }
    }
    Ok(seq)
}

fn dequantize_i8(v: &[i8], scale: f32) -> Vec<f32> {
    v.iter().map(|&q| q as f32 * scale).collect()
}

fn quantize_i8(v: &[f32], p: QuantParams) -> Vec<i8> {
    v.iter().map(|&x| p.quantize_value(x) as i8).collect()
}

impl Model {
    /// Checks that every tensor matches the topology.
    pub fn from_parts(topology: TopologyConfig, embedding: Embedding, weights: Weights) -> Result<Self, ModelError> {
        topology.validate()?;
        let m = Self { topology, embedding, weights };
        m.check_shapes()?;
        Ok(m)
    }

    fn check_shapes(&self) -> Result<(), ModelError> {
        let t = &self.topology;
        let width = |what: String, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(ModelError::Width { what, expected, actual })
            }
        };
        width("embedding rows".into(), t.vocab_size, self.embedding.vocab())?;
        width("embedding cols".into(), t.embedding_width, self.embedding.width())?;
        let layers = t.named_layers();
        let dims: Vec<(usize, usize, usize, usize)> = match &self.weights {
            Weights::Float(n) => n.encoder.iter().chain(&n.prediction).map(cell_dims).collect::<Result<_, _>>()?,
            Weights::Hybrid(n) => n.encoder.iter().chain(&n.prediction).map(cell_dims).collect::<Result<_, _>>()?,
            Weights::Integer(n) => n
                .encoder
                .iter()
                .chain(&n.prediction)
                .map(|c| {
                    let w = c.weights();
                    Ok((w.input_width(), w.hidden_width(), w.output_width(), w.gates.len()))
                })
                .collect::<Result<_, ModelError>>()?,
        };
        let (ne, np) = self.stack_lengths();
        width("encoder layers".into(), t.encoder.layers.len(), ne)?;
        width("prediction layers".into(), t.prediction.layers.len(), np)?;
        let flavors: Vec<(CellKind, bool)> = match &self.weights {
            Weights::Float(n) => {
                n.encoder.iter().chain(&n.prediction).map(|c| (c.kind(), c.layer_norm_enabled())).collect()
            }
            Weights::Hybrid(n) => {
                n.encoder.iter().chain(&n.prediction).map(|c| (c.kind(), c.layer_norm_enabled())).collect()
            }
            Weights::Integer(n) => n
                .encoder
                .iter()
                .chain(&n.prediction)
                .map(|c| {
                    let w = c.weights();
                    (w.kind, matches!(w.gates.first().map(|g| &g.tail), Some(GateTail::Norm(_))))
                })
                .collect(),
        };
        for ((name, spec), (kind, ln)) in layers.iter().zip(&flavors) {
            if spec.cell != *kind || spec.layer_norm != *ln {
                return Err(TopologyError::Invalid(format!(
                    "{name}: weights are {kind} (layer norm {ln}), topology declares {} (layer norm {})",
                    spec.cell, spec.layer_norm
                ))
                .into());
            }
        }
        for ((name, spec), (i, h, o, _)) in layers.iter().zip(&dims) {
            width(format!("{name} input"), spec.input, *i)?;
            width(format!("{name} hidden"), spec.hidden, *h)?;
            width(format!("{name} projection"), spec.projection, *o)?;
        }
        let j = match &self.weights {
            Weights::Float(n) => joint_dims(&n.joint),
            Weights::Hybrid(n) => joint_dims(&n.joint),
            Weights::Integer(n) => joint_dims(&n.joint),
        };
        width("joint encoder projection".into(), t.joint.width * t.encoder_width(), j.0)?;
        width("joint prediction projection".into(), t.joint.width * t.prediction_width(), j.1)?;
        width("joint output".into(), t.vocab_size * t.joint.width, j.2)?;
        width("joint bias".into(), t.joint.width, j.3)?;
        width("joint output bias".into(), t.vocab_size, j.4)?;
        Ok(())
    }

    fn stack_lengths(&self) -> (usize, usize) {
        match &self.weights {
            Weights::Float(n) => (n.encoder.len(), n.prediction.len()),
            Weights::Hybrid(n) => (n.encoder.len(), n.prediction.len()),
            Weights::Integer(n) => (n.encoder.len(), n.prediction.len()),
        }
    }

    /// Seeded random float model; layers with a sparsity target are pruned.
    pub fn random(topology: &TopologyConfig, seed: u64) -> Result<Self, ModelError> {
        topology.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells = Vec::new();
        for (_, l) in topology.named_layers() {
            let cell = Cell::random(
                CellDims {
                    kind: l.cell,
                    input: l.input,
                    hidden: l.hidden,
                    output: l.projection,
                    layer_norm: l.layer_norm,
                },
                &mut rng,
            );
            cells.push(match l.sparsity {
                Some(s) if s > 0.0 => prune_cell(&cell, s, l.block_shape())?,
                _ => cell,
            });
        }
        let prediction = cells.split_off(topology.encoder.layers.len());
        let j = topology.joint.width;
        let joint = Joint {
            enc_proj: uniform(&mut rng, j, topology.encoder_width(), 1.0 / (topology.encoder_width() as f32).sqrt())
                .into(),
            pred_proj: uniform(
                &mut rng,
                j,
                topology.prediction_width(),
                1.0 / (topology.prediction_width() as f32).sqrt(),
            )
            .into(),
            bias: (0..j).map(|_| rng.gen_range(-0.1..=0.1)).collect(),
            output: uniform(&mut rng, topology.vocab_size, j, 1.0 / (j as f32).sqrt()).into(),
            output_bias: (0..topology.vocab_size).map(|_| rng.gen_range(-0.1..=0.1)).collect(),
        };
        let embedding = Embedding::Float(uniform(&mut rng, topology.vocab_size, topology.embedding_width, 1.0));
        Self::from_parts(topology.clone(), embedding, Weights::Float(Network { encoder: cells, prediction, joint }))
    }

    /// All-zero dense float model; sparsity targets are dropped from the topology.
    pub fn zeros(topology: &TopologyConfig) -> Result<Self, ModelError> {
        let mut t = topology.clone();
        for l in t.encoder.layers.iter_mut().chain(t.prediction.layers.iter_mut()) {
            l.sparsity = None;
        }
        t.validate()?;
        let mut cells: Vec<Cell<Linear>> = t
            .named_layers()
            .into_iter()
            .map(|(_, l)| {
                Cell::zeros(CellDims {
                    kind: l.cell,
                    input: l.input,
                    hidden: l.hidden,
                    output: l.projection,
                    layer_norm: l.layer_norm,
                })
            })
            .collect();
        let prediction = cells.split_off(t.encoder.layers.len());
        let j = t.joint.width;
        let joint = Joint {
            enc_proj: Matrix::zeros(j, t.encoder_width()).into(),
            pred_proj: Matrix::zeros(j, t.prediction_width()).into(),
            bias: vec![0.0; j],
            output: Matrix::zeros(t.vocab_size, j).into(),
            output_bias: vec![0.0; t.vocab_size],
        };
        let embedding = Embedding::Float(Matrix::zeros(t.vocab_size, t.embedding_width));
        Self::from_parts(t, embedding, Weights::Float(Network { encoder: cells, prediction, joint }))
    }

    pub fn topology(&self) -> &TopologyConfig {
        &self.topology
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Mutable access for constructing special-purpose models; shapes are not rechecked.
    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn mode(&self) -> QuantMode {
        match self.weights {
            Weights::Float(_) => QuantMode::Float32,
            Weights::Hybrid(_) => QuantMode::Hybrid8,
            Weights::Integer(_) => QuantMode::Integer8_16,
        }
    }

    fn float_network(&self) -> Result<&Network<Linear>, ModelError> {
        match &self.weights {
            Weights::Float(n) => Ok(n),
            _ => Err(ModelError::Mode { expected: QuantMode::Float32, actual: self.mode() }),
        }
    }

    /// Parameters actually stored (pruned blocks excluded).
    pub fn stored_params(&self) -> usize {
        let emb = self.embedding.vocab() * self.embedding.width();
        emb + match &self.weights {
            Weights::Float(n) => network_params(n),
            Weights::Hybrid(n) => network_params(n),
            Weights::Integer(_) => count_params(&self.topology).map_or(0, |c| c.total - c.embedding),
        }
    }

    /// Block-prunes the input and recurrent matrices of every layer by L1 norm.
    pub fn prune(&self, sparsity: f64, block: BlockShape) -> Result<Model, ModelError> {
        let n = self.float_network()?;
        let topology = self.topology.clone().with_sparsity(sparsity, block);
        topology.validate()?;
        let prune_all = |cells: &[Cell<Linear>]| -> Result<Vec<Cell<Linear>>, ModelError> {
            cells.iter().map(|c| Ok(prune_cell(c, sparsity, block)?)).collect()
        };
        Self::from_parts(
            topology,
            self.embedding.clone(),
            Weights::Float(Network {
                encoder: prune_all(&n.encoder)?,
                prediction: prune_all(&n.prediction)?,
                joint: n.joint.clone(),
            }),
        )
    }

    /// 8-bit weights with per-call activation quantization; needs no statistics.
    pub fn to_hybrid(&self) -> Result<Model, ModelError> {
        let n = self.float_network()?;
        let conv = |cells: &[Cell<Linear>]| -> Result<Vec<Cell<QLinear>>, QuantError> {
            cells.iter().map(convert_cell_to_hybrid).collect()
        };
        Ok(Self {
            topology: self.topology.clone(),
            embedding: self.embedding.quantize()?,
            weights: Weights::Hybrid(Network {
                encoder: conv(&n.encoder)?,
                prediction: conv(&n.prediction)?,
                joint: n.joint.try_map(QLinear::quantize)?,
            }),
        })
    }

    /// Integer conversion with calibrated scales for every dynamic tensor.
    pub fn to_integer(&self, scales: &ScaleMap) -> Result<Model, ModelError> {
        let n = self.float_network()?;
        let missing: Vec<String> = model_dynamic_tensors(&self.topology)
            .into_iter()
            .map(|(id, _)| id)
            .filter(|id| !scales.contains_key(id))
            .collect();
        if !missing.is_empty() {
            return Err(ConvertError::MissingStats(missing).into());
        }
        let embedding = self.embedding.quantize()?;
        let Embedding::Quantized { params, .. } = &embedding else {
            unreachable!("quantize returns a quantized table")
        };
        let quantize = |cells: &[Cell<Linear>]| -> Result<Vec<IntegerCellWeights>, ConvertError> {
            cells.iter().map(quantize_cell_weights).collect()
        };
        let network = IntegerNetwork::build(
            quantize(&n.encoder)?,
            quantize(&n.prediction)?,
            *params,
            n.joint.try_map(QLinear::quantize)?,
            scales.clone(),
        )?;
        Ok(Self { topology: self.topology.clone(), embedding, weights: Weights::Integer(network) })
    }

    fn check_frames(&self, frames: &[Vec<f32>]) -> Result<(), ModelError> {
        for (t, f) in frames.iter().enumerate() {
            if f.len() != self.topology.feature_width {
                return Err(ModelError::Width {
                    what: format!("feature frame {t}"),
                    expected: self.topology.feature_width,
                    actual: f.len(),
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(format!("feature frame {t}")));
            }
        }
        Ok(())
    }

    fn encode_impl(
        &self,
        frames: &[Vec<f32>],
        obs: Option<&mut RangeObserver>,
        per_layer: Option<&mut LayerTrace>,
    ) -> Result<Vec<Vec<f32>>, ModelError> {
        self.check_frames(frames)?;
        let t = &self.topology;
        match &self.weights {
            Weights::Float(n) => run_float_stack(&n.encoder, "encoder", t, frames.to_vec(), obs, per_layer),
            Weights::Hybrid(n) => run_float_stack(&n.encoder, "encoder", t, frames.to_vec(), None, per_layer),
            Weights::Integer(n) => {
                let p = n.input_params();
                let codes = frames.iter().map(|f| quantize_i8(f, p)).collect();
                let out = run_int_stack(&n.encoder, "encoder", t, codes, per_layer)?;
                let s = n.encoder.last().expect("non-empty encoder").output_params().scale();
                Ok(out.iter().map(|h| dequantize_i8(h, s)).collect())
            }
        }
    }

    /// Encoder outputs, one per (time-reduced) frame.
    pub fn encode(&self, frames: &[Vec<f32>]) -> Result<Vec<Vec<f32>>, ModelError> {
        self.encode_impl(frames, None, None)
    }

    pub fn initial_prediction_state(&self) -> PredictionState {
        match &self.weights {
            Weights::Float(n) => PredictionState::Float(n.prediction.iter().map(|c| c.zero_state()).collect()),
            Weights::Hybrid(n) => PredictionState::Float(n.prediction.iter().map(|c| c.zero_state()).collect()),
            Weights::Integer(n) => PredictionState::Integer(n.prediction.iter().map(|c| c.zero_state()).collect()),
        }
    }

    fn check_token(&self, token: u32) -> Result<(), ModelError> {
        if token as usize >= self.topology.vocab_size {
            return Err(ModelError::Token { token, vocab: self.topology.vocab_size });
        }
        Ok(())
    }

    /// Feeds `token` to the prediction network; returns its (float) output and,
    /// if requested, every layer's output.
    fn predict_impl(
        &self,
        token: u32,
        state: &mut PredictionState,
        obs: Option<&mut RangeObserver>,
        mut per_layer: Option<&mut Vec<Vec<f32>>>,
    ) -> Result<Vec<f32>, ModelError> {
        self.check_token(token)?;
        match (&self.weights, state) {
            (Weights::Float(n), PredictionState::Float(s)) => {
                predict_float(&n.prediction, self.embedding.lookup(token), s, obs, per_layer)
            }
            (Weights::Hybrid(n), PredictionState::Float(s)) => {
                predict_float(&n.prediction, self.embedding.lookup(token), s, None, per_layer)
            }
            (Weights::Integer(n), PredictionState::Integer(s)) => {
                let Embedding::Quantized { table, .. } = &self.embedding else {
                    unreachable!("integer models carry a quantized embedding")
                };
                let mut x = table.row(token as usize).to_vec();
                for (i, (cell, st)) in n.prediction.iter().zip(s.iter_mut()).enumerate() {
                    x = cell
                        .step(&x, st)
                        .map_err(|e| ModelError::Cell { layer: format!("prediction.{i}"), source: e })?;
                    if let Some(v) = per_layer.as_deref_mut() {
                        v.push(dequantize_i8(&x, cell.output_params().scale()));
                    }
                }
                let s = n.prediction.last().expect("non-empty").output_params().scale();
                Ok(dequantize_i8(&x, s))
            }
            _ => unreachable!("state created by this model"),
        }
    }

    pub fn predict(&self, token: u32, state: &mut PredictionState) -> Result<Vec<f32>, ModelError> {
        self.predict_impl(token, state, None, None)
    }

    fn decode_impl(
        &self,
        frames: &[Vec<f32>],
        max_symbols_per_frame: usize,
        mut obs: Option<&mut RangeObserver>,
    ) -> Result<Vec<u32>, ModelError> {
        let enc = self.encode_impl(frames, obs.as_deref_mut(), None)?;
        let mut state = self.initial_prediction_state();
        let mut pred = self.predict_impl(BLANK, &mut state, obs.as_deref_mut(), None)?;
        let mut tokens = Vec::new();
        macro_rules! run_joint {
            ($joint:expr) => {{
                let joint = $joint;
                let mut pp = joint.project_prediction(&pred);
                for e in &enc {
                    let ep = joint.project_encoder(e);
                    for _ in 0..max_symbols_per_frame {
                        let logits = joint.logits(&ep, &pp);
                        if logits.iter().any(|v| !v.is_finite()) {
                            return Err(ModelError::NonFinite("joint logits".into()));
                        }
                        let k = argmax(&logits) as u32;
                        if k == BLANK {
                            break;
                        }
                        tokens.push(k);
                        pred = self.predict_impl(k, &mut state, obs.as_deref_mut(), None)?;
                        pp = joint.project_prediction(&pred);
                    }
                }
            }};
        }
        match &self.weights {
            Weights::Float(n) => run_joint!(&n.joint),
            Weights::Hybrid(n) => run_joint!(&n.joint),
            Weights::Integer(n) => run_joint!(&n.joint),
        }
        Ok(tokens)
    }

    /// Greedy RNN-T decoding: per encoder frame, emit the argmax token and
    /// advance the prediction network until blank or `max_symbols_per_frame`.
    pub fn greedy_decode(&self, frames: &[Vec<f32>], max_symbols_per_frame: usize) -> Result<Vec<u32>, ModelError> {
        self.decode_impl(frames, max_symbols_per_frame, None)
    }

    /// Runs float greedy decoding while observing every dynamic tensor.
    pub fn observe_utterance(
        &self,
        frames: &[Vec<f32>],
        max_symbols_per_frame: usize,
        obs: &mut RangeObserver,
    ) -> Result<Vec<u32>, ModelError> {
        self.float_network()?;
        obs.observe(ENCODER_INPUT, &frames.concat())?;
        self.decode_impl(frames, max_symbols_per_frame, Some(obs))
    }

    /// Outputs of every layer: encoder layers on `frames`, prediction layers on
    /// `[blank] + tokens`.
    pub fn layer_outputs(&self, frames: &[Vec<f32>], tokens: &[u32]) -> Result<LayerTrace, ModelError> {
        let mut out = Vec::new();
        self.encode_impl(frames, None, Some(&mut out))?;
        let mut state = self.initial_prediction_state();
        let np = self.topology.prediction.layers.len();
        let mut pred: Vec<Vec<Vec<f32>>> = vec![Vec::new(); np];
        for &tok in std::iter::once(&BLANK).chain(tokens) {
            let mut layers = Vec::with_capacity(np);
            self.predict_impl(tok, &mut state, None, Some(&mut layers))?;
            for (acc, l) in pred.iter_mut().zip(layers) {
                acc.push(l);
            }
        }
        out.extend(pred.into_iter().enumerate().map(|(i, v)| (format!("prediction.{i}"), v)));
        Ok(out)
    }
}

fn predict_float<L: MatVec>(
    cells: &[Cell<L>],
    mut x: Vec<f32>,
    states: &mut [CellState],
    mut obs: Option<&mut RangeObserver>,
    mut per_layer: Option<&mut Vec<Vec<f32>>>,
) -> Result<Vec<f32>, ModelError> {
    for (i, (cell, s)) in cells.iter().zip(states.iter_mut()).enumerate() {
        let name = format!("prediction.{i}");
        x = match obs.as_deref_mut() {
            Some(o) => {
                let mut p = LayerProbe { obs: o, layer: &name, error: None };
                let h = cell.step_in_place(&x, s, &mut p);
                if let Some(e) = p.error {
                    return Err(e.into());
                }
                h
            }
            None => cell.step_in_place(&x, s, &mut NoProbe),
        }
        .map_err(cell_err(&name, 0))?;
        if let Some(v) = per_layer.as_deref_mut() {
            v.push(x.clone());
        }
    }
    Ok(x)
}

fn cell_dims<L: MatVec>(c: &Cell<L>) -> Result<(usize, usize, usize, usize), ModelError> {
    c.validate().map_err(|e| ModelError::Cell { layer: "cell".into(), source: e })?;
    Ok((c.input_width(), c.hidden_width(), c.output_width(), c.gates().len()))
}

fn joint_dims<L: MatVec>(j: &Joint<L>) -> (usize, usize, usize, usize, usize) {
    (
        j.enc_proj.rows() * j.enc_proj.cols(),
        j.pred_proj.rows() * j.pred_proj.cols(),
        j.output.rows() * j.output.cols(),
        j.bias.len(),
        j.output_bias.len(),
    )
}

fn network_params<L: MatVec>(n: &Network<L>) -> usize {
    n.encoder.iter().chain(&n.prediction).map(|c| c.stored_params()).sum::<usize>() + n.joint.stored_params()
}

fn prune_cell(cell: &Cell<Linear>, sparsity: f64, block: BlockShape) -> Result<Cell<Linear>, PruningError> {
    cell.try_map(|role: MatrixRole, l| {
        if role.is_prunable() {
            Ok(Linear::Sparse(prune_to_block_sparse(&l.to_dense(), sparsity, block)?))
        } else {
            Ok(l.clone())
        }
    })
}

/// A model whose joint network always prefers blank.
pub fn blank_only(model: &Model) -> Model {
    let mut m = model.clone();
    let set = |b: &mut Vec<f32>| {
        b.iter_mut().for_each(|v| *v = -1e3);
        b[BLANK as usize] = 1e3;
    };
    match &mut m.weights {
        Weights::Float(n) => set(&mut n.joint.output_bias),
        Weights::Hybrid(n) => set(&mut n.joint.output_bias),
        Weights::Integer(n) => set(&mut n.joint.output_bias),
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;

    fn frames(n: usize, width: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..width).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).collect()
    }

    #[test]
    fn stack_frames_pads_partial_group() {
        let s = stack_frames(&[vec![1, 2], vec![3, 4], vec![5, 6]], 2);
        assert_eq!(s, vec![vec![1, 2, 3, 4], vec![5, 6, 0, 0]]);
        assert!(stack_frames::<i8>(&[], 2).is_empty());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn stored_params_match_count() {
        for kind in [CellKind::Lstm, CellKind::Cifg, CellKind::Sru] {
            let t = TopologyConfig::tiny(kind);
            let m = Model::random(&t, 1).unwrap();
            assert_eq!(m.stored_params(), count_params(&t).unwrap().total);
            let p = m.prune(0.5, BlockShape::DEFAULT).unwrap();
            assert_eq!(p.stored_params(), count_params(p.topology()).unwrap().total);
            assert!(p.stored_params() < m.stored_params());
        }
    }

    #[test]
    fn empty_and_blank_only_decode() {
        let t = TopologyConfig::tiny(CellKind::Lstm);
        let m = Model::random(&t, 2).unwrap();
        assert!(m.greedy_decode(&[], 10).unwrap().is_empty());
        let b = blank_only(&m);
        assert!(b.greedy_decode(&frames(12, 8, 3), 10).unwrap().is_empty());
    }

    #[test]
    fn decode_errors() {
        let t = TopologyConfig::tiny(CellKind::Lstm);
        let m = Model::random(&t, 2).unwrap();
        assert!(matches!(m.greedy_decode(&[vec![0.0; 7]], 10), Err(ModelError::Width { .. })));
        assert!(matches!(m.greedy_decode(&[vec![f32::NAN; 8]], 10), Err(ModelError::NonFinite(_))));
    }

    #[test]
    fn time_reduction_halves_frames() {
        let t = TopologyConfig::tiny(CellKind::Sru);
        let m = Model::random(&t, 4).unwrap();
        assert_eq!(m.encode(&frames(7, 8, 1)).unwrap().len(), 4);
    }

    #[test]
    fn symbols_per_frame_bound() {
        let t = TopologyConfig::tiny(CellKind::Lstm);
        let mut m = Model::random(&t, 5).unwrap();
        if let Weights::Float(n) = m.weights_mut() {
            n.joint.output_bias[3] = 1e3;
        }
        let out = m.greedy_decode(&frames(6, 8, 2), 4).unwrap();
        assert_eq!(out, vec![3; 3 * 4]);
    }

    #[test]
    fn integer_conversion_needs_complete_stats() {
        let t = TopologyConfig::tiny(CellKind::Cifg);
        let m = Model::random(&t, 6).unwrap();
        match m.to_integer(&ScaleMap::new()) {
            Err(ModelError::Convert(ConvertError::MissingStats(ids))) => {
                assert_eq!(ids.len(), model_dynamic_tensors(&t).len())
            }
            other => panic!("{other:?}"),
        }
    }
}
