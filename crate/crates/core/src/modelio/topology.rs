//! RNN-T layer-stack description and exact parameter counting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocksparse::BlockShape;
use crate::cells::CellKind;
use crate::pruning::pruned_block_count;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("{0}")]
    Invalid(String),

    #[error("topology parse error: {0}")]
    Parse(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, TopologyError> {
    Err(TopologyError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointActivation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub width: usize,
    #[serde(default)]
    pub activation: JointActivation,
}

/// Stacks `factor` consecutive outputs of encoder layer `after_layer - 1` into
/// one frame (a trailing partial group is zero-padded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeReduction {
    pub after_layer: usize,
    pub factor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub cell: CellKind,
    pub input: usize,
    pub hidden: usize,
    pub projection: usize,
    #[serde(default)]
    pub layer_norm: bool,
    /// Block sparsity of the input and recurrent matrices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<BlockShape>,
}

impl LayerSpec {
    pub fn new(cell: CellKind, input: usize, hidden: usize, projection: usize, layer_norm: bool) -> Self {
        Self { cell, input, hidden, projection, layer_norm, sparsity: None, block: None }
    }

    pub fn block_shape(&self) -> BlockShape {
        self.block.unwrap_or_default()
    }

    /// Number of gates carrying weight matrices.
    pub fn gate_count(&self) -> usize {
        match self.cell {
            CellKind::Lstm | CellKind::Sru => 4,
            CellKind::Cifg => 3,
        }
    }

    /// Shapes `(rows, cols)` of the prunable input and recurrent matrices.
    pub fn prunable_shapes(&self) -> Vec<(usize, usize)> {
        let g = self.gate_count();
        let mut v = vec![(self.hidden, self.input); g];
        if self.cell != CellKind::Sru {
            v.extend(vec![(self.hidden, self.projection); g]);
        }
        v
    }

    /// Stored values of one `rows × cols` prunable matrix at this layer's sparsity.
    pub fn retained(&self, rows: usize, cols: usize) -> usize {
        match self.sparsity {
            Some(s) if s > 0.0 => {
                let b = self.block_shape();
                let n = (rows / b.rows) * (cols / b.cols);
                (n - pruned_block_count(s, n)) * b.len()
            }
            _ => rows * cols,
        }
    }

    pub fn count(&self) -> LayerCount {
        let dense: usize = self.prunable_shapes().iter().map(|&(r, c)| r * c).sum();
        let retained: usize = self.prunable_shapes().iter().map(|&(r, c)| self.retained(r, c)).sum();
        let g = self.gate_count();
        let h = self.hidden;
        let norm = match (self.layer_norm, self.cell) {
            (false, _) => 0,
            // gains on f and r, gain and bias on c
            (true, CellKind::Sru) => 4 * h,
            (true, _) => g * h,
        };
        LayerCount {
            matrices_dense: dense,
            matrices_retained: retained,
            vectors: g * h + norm,
            projection: self.projection * h,
        }
    }

    fn validate(&self, name: &str) -> Result<(), TopologyError> {
        if self.input == 0 || self.hidden == 0 || self.projection == 0 {
            return invalid(format!("{name}: widths must be positive"));
        }
        if let Some(s) = self.sparsity {
            if !(0.0..1.0).contains(&s) {
                return invalid(format!("{name}: sparsity {s} outside [0, 1)"));
            }
            let b = self.block_shape();
            for (r, c) in self.prunable_shapes() {
                if r % b.rows != 0 || c % b.cols != 0 {
                    return invalid(format!("{name}: {r}x{c} matrices are not divisible by block {b}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerCount {
    /// Input and recurrent matrices before pruning.
    pub matrices_dense: usize,
    /// Input and recurrent matrix values actually stored.
    pub matrices_retained: usize,
    /// Biases and layer-norm parameters.
    pub vectors: usize,
    pub projection: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.matrices_retained + self.vectors + self.projection
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub layers: Vec<LayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_reduction: Option<TimeReduction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSpec {
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub feature_width: usize,
    pub vocab_size: usize,
    pub embedding_width: usize,
    pub joint: JointSpec,
    pub encoder: EncoderSpec,
    pub prediction: PredictionSpec,
}

/// Parameter count with a per-section breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ParamCount {
    pub encoder: usize,
    pub prediction: usize,
    pub embedding: usize,
    pub joint: usize,
    /// Input and recurrent matrices before pruning (the prunable mass).
    pub prunable_dense: usize,
    /// Input and recurrent matrix values kept after pruning.
    pub prunable_retained: usize,
    pub total: usize,
}

impl TopologyConfig {
    /// 8 encoder and 2 prediction LSTM layers (2048 hidden, 640 projection),
    /// 4096 word pieces, 640-wide joint, layer norm everywhere, 2× time
    /// reduction after the second encoder layer.
    pub fn baseline() -> Self {
        Self::stacked(CellKind::Lstm, 512, 2048, 640, 128, 640, 4096, true)
    }

    /// The baseline with every layer a CIFG.
    pub fn baseline_cifg() -> Self {
        Self::stacked(CellKind::Cifg, 512, 2048, 640, 128, 640, 4096, true)
    }

    /// A small model for tests and demos.
    pub fn tiny(cell: CellKind) -> Self {
        let mut t = Self::stacked(cell, 8, 32, 16, 8, 16, 6, true);
        t.encoder.layers.truncate(3);
        t
    }

    #[allow(clippy::too_many_arguments)]
    fn stacked(
        cell: CellKind,
        features: usize,
        hidden: usize,
        proj: usize,
        embedding: usize,
        joint: usize,
        vocab: usize,
        layer_norm: bool,
    ) -> Self {
        let mut encoder: Vec<LayerSpec> =
            (0..8).map(|_| LayerSpec::new(cell, proj, hidden, proj, layer_norm)).collect();
        encoder[0].input = features;
        encoder[2].input = 2 * proj;
        let prediction = vec![
            LayerSpec::new(cell, embedding, hidden, proj, layer_norm),
            LayerSpec::new(cell, proj, hidden, proj, layer_norm),
        ];
        Self {
            feature_width: features,
            vocab_size: vocab,
            embedding_width: embedding,
            joint: JointSpec { width: joint, activation: JointActivation::Tanh },
            encoder: EncoderSpec { layers: encoder, time_reduction: Some(TimeReduction { after_layer: 2, factor: 2 }) },
            prediction: PredictionSpec { layers: prediction },
        }
    }

    /// Sets the same sparsity and block shape on every recurrent layer.
    pub fn with_sparsity(mut self, sparsity: f64, block: BlockShape) -> Self {
        for l in self.encoder.layers.iter_mut().chain(self.prediction.layers.iter_mut()) {
            l.sparsity = (sparsity > 0.0).then_some(sparsity);
            l.block = (sparsity > 0.0).then_some(block);
        }
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self, TopologyError> {
        let t: Self = toml::from_str(s).map_err(|e| TopologyError::Parse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    /// Canonical text form; identical configs give identical strings.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("topology serializes")
    }

    /// Encoder output width (last layer projection).
    pub fn encoder_width(&self) -> usize {
        self.encoder.layers.last().map_or(0, |l| l.projection)
    }

    pub fn prediction_width(&self) -> usize {
        self.prediction.layers.last().map_or(0, |l| l.projection)
    }

    /// Time-reduction factor applied before encoder layer `i`.
    pub fn stacking_before(&self, i: usize) -> usize {
        match self.encoder.time_reduction {
            Some(tr) if tr.after_layer == i => tr.factor,
            _ => 1,
        }
    }

    /// Named layer specs, `encoder.0 ...` then `prediction.0 ...`.
    pub fn named_layers(&self) -> Vec<(String, &LayerSpec)> {
        let enc = self.encoder.layers.iter().enumerate().map(|(i, l)| (format!("encoder.{i}"), l));
        let pred = self.prediction.layers.iter().enumerate().map(|(i, l)| (format!("prediction.{i}"), l));
        enc.chain(pred).collect()
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.vocab_size < 2 {
            return invalid(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.feature_width == 0 || self.embedding_width == 0 || self.joint.width == 0 {
            return invalid("feature, embedding and joint widths must be positive");
        }
        if self.encoder.layers.is_empty() || self.prediction.layers.is_empty() {
            return invalid("encoder and prediction network need at least one layer each");
        }
        if let Some(tr) = self.encoder.time_reduction {
            if tr.factor == 0 || tr.after_layer == 0 || tr.after_layer >= self.encoder.layers.len() {
                return invalid(format!(
                    "time reduction after layer {} by {} does not fit {} encoder layers",
                    tr.after_layer,
                    tr.factor,
                    self.encoder.layers.len()
                ));
            }
        }
        let mut width = self.feature_width;
        for (i, l) in self.encoder.layers.iter().enumerate() {
            let expected = width * self.stacking_before(i);
            if l.input != expected {
                return invalid(format!("encoder.{i}: input width {} but {} arrives", l.input, expected));
            }
            l.validate(&format!("encoder.{i}"))?;
            width = l.projection;
        }
        let mut width = self.embedding_width;
        for (i, l) in self.prediction.layers.iter().enumerate() {
            if l.input != width {
                return invalid(format!("prediction.{i}: input width {} but {} arrives", l.input, width));
            }
            l.validate(&format!("prediction.{i}"))?;
            width = l.projection;
        }
        Ok(())
    }
}

/// Exact parameter count; pruned layers count only their retained matrix values.
pub fn count_params(t: &TopologyConfig) -> Result<ParamCount, TopologyError> {
    t.validate()?;
    let mut c = ParamCount::default();
    for (name, l) in t.named_layers() {
        let lc = l.count();
        c.prunable_dense += lc.matrices_dense;
        c.prunable_retained += lc.matrices_retained;
        if name.starts_with("encoder") {
            c.encoder += lc.total();
        } else {
            c.prediction += lc.total();
        }
    }
    c.embedding = t.vocab_size * t.embedding_width;
    let j = t.joint.width;
    c.joint = j * t.encoder_width() + j * t.prediction_width() + j + t.vocab_size * j + t.vocab_size;
    c.total = c.encoder + c.prediction + c.embedding + c.joint;
    Ok(c)
}
