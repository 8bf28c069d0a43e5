//! Binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ERNN"  u32 version
//! section*        tag: [u8; 4]  length: u64  payload
//!   TOPO          canonical TOML text of the topology
//!   MODE          float32 | hybrid8 | integer8_16
//!   TENS          u32 count, tensor records
//!   SCAL          integer models only: u32 count, (id, bits: u8, scale: f32)*
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! A tensor record is `id` (u16 length + UTF-8), dtype (u8: 0 f32, 1 i8, 2 i32),
//! layout (u8: 0 dense, 1 bcsr), rank (u8) and u32 dims, an optional quantization
//! (u8 flag, then bits: u8 and scale: f32), then the payload. Dense payloads are
//! the row-major values. Block-sparse payloads are block rows and cols (u32 each),
//! ledger entry width (u8: 2 or 4), ledger length (u32) and entries, value count
//! (u32) and the block values.
//!
//! Unknown sections are skipped.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::blocksparse::{BlockShape, BlockSparseMatrix};
use crate::calibrate::{CalibrationError, RangeObserver, ScaleMap, TensorRange};
use crate::cells::CellKind;
use crate::cells::{Cell, CifgWeights, Gate, LayerNormParams, LstmWeights, SruWeights, LN_EPSILON};
use crate::fixedpoint::{BitWidth, QuantParams, QuantizedTensor};
use crate::linear::Linear;
use crate::matrix::Matrix;
use crate::pruning::pruned_block_count;
use crate::quant::{gate_names, GateTail, IntGateWeights, IntLayerNorm, IntegerCellWeights, QLinear, QMatrix};
use crate::rnnt::{
    model_dynamic_tensors, Embedding, IntegerNetwork, Joint, Model, ModelError, Network, QuantMode, Weights,
};

use super::topology::{LayerSpec, TopologyConfig};

pub const MODEL_MAGIC: &[u8; 4] = b"ERNN";
pub const STATS_MAGIC: &[u8; 4] = b"ERNS";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: u64 = 8;
const SECTION_HEADER_LEN: u64 = 12;
const CHECKSUM_LEN: u64 = 4;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x} (file truncated or corrupt)")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(u32),

    #[error("missing tensors: {}", .0.join(", "))]
    MissingTensor(Vec<String>),

    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

fn format_err<T>(msg: impl Into<String>) -> Result<T, ModelIoError> {
    Err(ModelIoError::Format(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::I32 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self, ModelIoError> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::I8),
            2 => Ok(DType::I32),
            _ => format_err(format!("unknown dtype code {c}")),
        }
    }

    fn size(self) -> u64 {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }
}

/// Storage layout of a tensor as described by the topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutDesc {
    Dense,
    Bcsr { block: BlockShape, stored_blocks: usize },
}

/// What a tensor looks like on disk, without its values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDesc {
    pub id: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub quantized: bool,
    pub layout: LayoutDesc,
}

impl TensorDesc {
    fn record_len(&self) -> u64 {
        let mut n = 2 + self.id.len() as u64 + 3 + 4 * self.dims.len() as u64 + 1;
        if self.quantized {
            n += 5;
        }
        let total: usize = self.dims.iter().product();
        match self.layout {
            LayoutDesc::Dense => n + total as u64 * self.dtype.size(),
            LayoutDesc::Bcsr { block, stored_blocks } => {
                let block_rows = self.dims[0] / block.rows;
                let block_cols = self.dims[1] / block.cols;
                let ledger = (block_rows + stored_blocks) as u64 * ledger_width(block_cols) as u64;
                n + 8 + 1 + 4 + ledger + 4 + (stored_blocks * block.len()) as u64 * self.dtype.size()
            }
        }
    }
}

fn ledger_width(block_cols: usize) -> u8 {
    if block_cols <= u16::MAX as usize {
        2
    } else {
        4
    }
}

/// Every tensor a model of this topology and mode stores, in file order.
pub fn expected_tensors(t: &TopologyConfig, mode: QuantMode) -> Vec<TensorDesc> {
    let q = mode != QuantMode::Float32;
    let (mdtype, mquant) = if q { (DType::I8, true) } else { (DType::F32, false) };
    let dense = |id: String, dims: Vec<usize>, dtype: DType, quantized: bool| TensorDesc {
        id,
        dtype,
        dims,
        quantized,
        layout: LayoutDesc::Dense,
    };
    let mut v = vec![dense("embedding".into(), vec![t.vocab_size, t.embedding_width], mdtype, mquant)];
    for (name, l) in t.named_layers() {
        let matrix = |id: String, rows: usize, cols: usize| {
            let layout = match l.sparsity {
                Some(s) if s > 0.0 => {
                    let b = l.block_shape();
                    let n = (rows / b.rows) * (cols / b.cols);
                    LayoutDesc::Bcsr { block: b, stored_blocks: n - pruned_block_count(s, n) }
                }
                _ => LayoutDesc::Dense,
            };
            TensorDesc { id, dtype: mdtype, dims: vec![rows, cols], quantized: mquant, layout }
        };
        let h = l.hidden;
        for g in gate_names(l.cell) {
            let p = format!("{name}.{g}");
            v.push(matrix(format!("{p}.W"), h, l.input));
            if l.cell != CellKind::Sru {
                v.push(matrix(format!("{p}.R"), h, l.projection));
            }
            let normalized = gate_normalized(l, g);
            if mode == QuantMode::Integer8_16 {
                if normalized {
                    v.push(dense(format!("{p}.ln_gain"), vec![h], DType::I8, true));
                }
                v.push(dense(format!("{p}.b"), vec![h], DType::I32, true));
            } else {
                v.push(dense(format!("{p}.b"), vec![h], DType::F32, false));
                if normalized {
                    v.push(dense(format!("{p}.ln_gain"), vec![h], DType::F32, false));
                }
            }
        }
        if l.cell == CellKind::Sru && l.layer_norm {
            if mode == QuantMode::Integer8_16 {
                v.push(dense(format!("{name}.cell_norm.gain"), vec![h], DType::I8, true));
                v.push(dense(format!("{name}.cell_norm.bias"), vec![h], DType::I32, true));
            } else {
                v.push(dense(format!("{name}.cell_norm.gain"), vec![h], DType::F32, false));
                v.push(dense(format!("{name}.cell_norm.bias"), vec![h], DType::F32, false));
            }
        }
        v.push(dense(format!("{name}.projection"), vec![l.projection, h], mdtype, mquant));
    }
    let j = t.joint.width;
    v.push(dense("joint.enc_proj".into(), vec![j, t.encoder_width()], mdtype, mquant));
    v.push(dense("joint.pred_proj".into(), vec![j, t.prediction_width()], mdtype, mquant));
    v.push(dense("joint.bias".into(), vec![j], DType::F32, false));
    v.push(dense("joint.output".into(), vec![t.vocab_size, j], mdtype, mquant));
    v.push(dense("joint.output_bias".into(), vec![t.vocab_size], DType::F32, false));
    v
}

fn gate_normalized(l: &LayerSpec, gate: &str) -> bool {
    l.layer_norm && !(l.cell == CellKind::Sru && (gate == "x1" || gate == "x2"))
}

/// Predicted file size in bytes, computed from the topology alone.
pub fn file_size_estimate(t: &TopologyConfig, mode: QuantMode) -> u64 {
    let topo = t.to_toml_string().len() as u64;
    let tensors: u64 = expected_tensors(t, mode).iter().map(|d| d.record_len()).sum();
    let mut n = HEADER_LEN
        + SECTION_HEADER_LEN
        + topo
        + SECTION_HEADER_LEN
        + mode.tag().len() as u64
        + SECTION_HEADER_LEN
        + 4
        + tensors;
    if mode == QuantMode::Integer8_16 {
        let scal: u64 = model_dynamic_tensors(t).iter().map(|(id, _)| 2 + id.len() as u64 + 5).sum();
        n += SECTION_HEADER_LEN + 4 + scal;
    }
    n + CHECKSUM_LEN
}

enum Payload<'a> {
    F32(&'a [f32]),
    I8(&'a [i8]),
    I32(&'a [i32]),
    /// 8-bit values held as `i32` in memory.
    NarrowI32(&'a [i32]),
}

impl Payload<'_> {
    fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::I8(_) | Payload::NarrowI32(_) => DType::I8,
            Payload::I32(_) => DType::I32,
        }
    }
}

enum LayoutRef<'a> {
    Dense,
    Bcsr { block: BlockShape, ledger: &'a [u32] },
}

struct TensorRef<'a> {
    id: String,
    dims: Vec<usize>,
    quant: Option<QuantParams>,
    layout: LayoutRef<'a>,
    payload: Payload<'a>,
}

impl TensorRef<'_> {
    fn desc(&self) -> TensorDesc {
        TensorDesc {
            id: self.id.clone(),
            dtype: self.payload.dtype(),
            dims: self.dims.clone(),
            quantized: self.quant.is_some(),
            layout: match &self.layout {
                LayoutRef::Dense => LayoutDesc::Dense,
                LayoutRef::Bcsr { block, ledger } => {
                    let block_rows = self.dims[0] / block.rows;
                    LayoutDesc::Bcsr { block: *block, stored_blocks: ledger.len() - block_rows }
                }
            },
        }
    }
}

fn vector(id: String, v: &[f32]) -> TensorRef<'_> {
    TensorRef { id, dims: vec![v.len()], quant: None, layout: LayoutRef::Dense, payload: Payload::F32(v) }
}

fn qvector(id: String, t: &QuantizedTensor) -> TensorRef<'_> {
    TensorRef {
        id,
        dims: vec![t.len()],
        quant: Some(t.params),
        layout: LayoutRef::Dense,
        payload: Payload::I32(&t.data),
    }
}

fn linear_ref(id: String, l: &Linear) -> TensorRef<'_> {
    match l {
        Linear::Dense(m) => TensorRef {
            id,
            dims: vec![m.rows(), m.cols()],
            quant: None,
            layout: LayoutRef::Dense,
            payload: Payload::F32(m.as_slice()),
        },
        Linear::Sparse(m) => TensorRef {
            id,
            dims: vec![m.rows(), m.cols()],
            quant: None,
            layout: LayoutRef::Bcsr { block: m.block_shape(), ledger: m.ledger() },
            payload: Payload::F32(m.data()),
        },
    }
}

fn qlinear_ref(id: String, l: &QLinear) -> TensorRef<'_> {
    match l.weights() {
        QMatrix::Dense(m) => TensorRef {
            id,
            dims: vec![m.rows(), m.cols()],
            quant: Some(l.params()),
            layout: LayoutRef::Dense,
            payload: Payload::I8(m.as_slice()),
        },
        QMatrix::Sparse(m) => TensorRef {
            id,
            dims: vec![m.rows(), m.cols()],
            quant: Some(l.params()),
            layout: LayoutRef::Bcsr { block: m.block_shape(), ledger: m.ledger() },
            payload: Payload::I8(m.data()),
        },
    }
}

trait MatrixRef {
    fn tensor_ref(&self, id: String) -> TensorRef<'_>;
}

impl MatrixRef for Linear {
    fn tensor_ref(&self, id: String) -> TensorRef<'_> {
        linear_ref(id, self)
    }
}

impl MatrixRef for QLinear {
    fn tensor_ref(&self, id: String) -> TensorRef<'_> {
        qlinear_ref(id, self)
    }
}

fn float_cell_refs<'a, L: MatrixRef + crate::linear::MatVec>(name: &str, c: &'a Cell<L>, out: &mut Vec<TensorRef<'a>>) {
    for (g, gate) in c.gates() {
        let p = format!("{name}.{g}");
        out.push(gate.input.tensor_ref(format!("{p}.W")));
        if let Some(r) = &gate.recurrent {
            out.push(r.tensor_ref(format!("{p}.R")));
        }
        out.push(vector(format!("{p}.b"), &gate.bias));
        if let Some(gain) = &gate.norm_gain {
            out.push(vector(format!("{p}.ln_gain"), gain));
        }
    }
    if let Cell::Sru(w) = c {
        if let Some(n) = &w.cell_norm {
            out.push(vector(format!("{name}.cell_norm.gain"), &n.gain));
            out.push(vector(format!("{name}.cell_norm.bias"), &n.bias));
        }
    }
    out.push(c.projection().tensor_ref(format!("{name}.projection")));
}

fn integer_cell_refs<'a>(name: &str, w: &'a IntegerCellWeights, out: &mut Vec<TensorRef<'a>>) {
    for (g, gate) in w.gate_names().iter().zip(&w.gates) {
        let p = format!("{name}.{g}");
        out.push(qlinear_ref(format!("{p}.W"), &gate.input));
        if let Some(r) = &gate.recurrent {
            out.push(qlinear_ref(format!("{p}.R"), r));
        }
        match &gate.tail {
            GateTail::Norm(ln) => {
                out.push(i8_vector(format!("{p}.ln_gain"), ln.gain()));
                out.push(qvector(format!("{p}.b"), ln.bias()));
            }
            GateTail::Bias(b) => out.push(qvector(format!("{p}.b"), b)),
        }
    }
    if let Some(ln) = &w.cell_norm {
        out.push(i8_vector(format!("{name}.cell_norm.gain"), ln.gain()));
        out.push(qvector(format!("{name}.cell_norm.bias"), ln.bias()));
    }
    out.push(qlinear_ref(format!("{name}.projection"), &w.projection));
}

fn i8_vector(id: String, t: &QuantizedTensor) -> TensorRef<'_> {
    TensorRef {
        id,
        dims: vec![t.len()],
        quant: Some(t.params),
        layout: LayoutRef::Dense,
        payload: Payload::NarrowI32(&t.data),
    }
}

fn joint_refs<'a, L: MatrixRef>(j: &'a Joint<L>, out: &mut Vec<TensorRef<'a>>) {
    out.push(j.enc_proj.tensor_ref("joint.enc_proj".into()));
    out.push(j.pred_proj.tensor_ref("joint.pred_proj".into()));
    out.push(vector("joint.bias".into(), &j.bias));
    out.push(j.output.tensor_ref("joint.output".into()));
    out.push(vector("joint.output_bias".into(), &j.output_bias));
}

fn model_tensors(m: &Model) -> Vec<TensorRef<'_>> {
    let mut out = Vec::new();
    out.push(match m.embedding() {
        Embedding::Float(e) => TensorRef {
            id: "embedding".into(),
            dims: vec![e.rows(), e.cols()],
            quant: None,
            layout: LayoutRef::Dense,
            payload: Payload::F32(e.as_slice()),
        },
        Embedding::Quantized { table, params } => TensorRef {
            id: "embedding".into(),
            dims: vec![table.rows(), table.cols()],
            quant: Some(*params),
            layout: LayoutRef::Dense,
            payload: Payload::I8(table.as_slice()),
        },
    });
    let names: Vec<String> = m.topology().named_layers().into_iter().map(|(n, _)| n).collect();
    match m.weights() {
        Weights::Float(n) => {
            for (name, c) in names.iter().zip(n.encoder.iter().chain(&n.prediction)) {
                float_cell_refs(name, c, &mut out);
            }
            joint_refs(&n.joint, &mut out);
        }
        Weights::Hybrid(n) => {
            for (name, c) in names.iter().zip(n.encoder.iter().chain(&n.prediction)) {
                float_cell_refs(name, c, &mut out);
            }
            joint_refs(&n.joint, &mut out);
        }
        Weights::Integer(n) => {
            for (name, c) in names.iter().zip(n.encoder.iter().chain(&n.prediction)) {
                integer_cell_refs(name, c.weights(), &mut out);
            }
            joint_refs(&n.joint, &mut out);
        }
    }
    out
}

/// Writer that checksums and counts everything passing through.
struct CrcWriter<W> {
    inner: W,
    hasher: crc32fast::Hasher,
    written: u64,
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn write_values<W: Write, T: Copy, const N: usize>(w: &mut W, v: &[T], to_le: impl Fn(T) -> [u8; N]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(N * 4096.min(v.len()));
    for chunk in v.chunks(4096) {
        buf.clear();
        for &x in chunk {
            buf.extend_from_slice(&to_le(x));
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u16).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn write_tensor<W: Write>(w: &mut W, t: &TensorRef<'_>) -> io::Result<()> {
    write_str(w, &t.id)?;
    let layout = match t.layout {
        LayoutRef::Dense => 0u8,
        LayoutRef::Bcsr { .. } => 1,
    };
    w.write_all(&[t.payload.dtype().code(), layout, t.dims.len() as u8])?;
    for &d in &t.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match t.quant {
        Some(p) => {
            w.write_all(&[1, p.bits().bits() as u8])?;
            w.write_all(&p.scale().to_le_bytes())?;
        }
        None => w.write_all(&[0])?,
    }
    if let LayoutRef::Bcsr { block, ledger } = t.layout {
        w.write_all(&(block.rows as u32).to_le_bytes())?;
        w.write_all(&(block.cols as u32).to_le_bytes())?;
        let width = ledger_width(t.dims[1] / block.cols);
        w.write_all(&[width])?;
        w.write_all(&(ledger.len() as u32).to_le_bytes())?;
        if width == 2 {
            write_values(w, ledger, |v| (v as u16).to_le_bytes())?;
        } else {
            write_values(w, ledger, |v| v.to_le_bytes())?;
        }
        let count = match t.payload {
            Payload::F32(v) => v.len(),
            Payload::I8(v) => v.len(),
            Payload::I32(v) | Payload::NarrowI32(v) => v.len(),
        };
        w.write_all(&(count as u32).to_le_bytes())?;
    }
    match t.payload {
        Payload::F32(v) => write_values(w, v, f32::to_le_bytes),
        Payload::I8(v) => write_values(w, v, i8::to_le_bytes),
        Payload::I32(v) => write_values(w, v, i32::to_le_bytes),
        Payload::NarrowI32(v) => write_values(w, v, |x| (x as i8).to_le_bytes()),
    }
}

fn section<W: Write>(w: &mut W, tag: &[u8; 4], len: u64) -> io::Result<()> {
    w.write_all(tag)?;
    w.write_all(&len.to_le_bytes())
}

/// Serializes `model`; returns the number of bytes written.
pub fn write_model<W: Write>(model: &Model, w: W) -> Result<u64, ModelIoError> {
    let mut w = CrcWriter { inner: w, hasher: crc32fast::Hasher::new(), written: 0 };
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let topo = model.topology().to_toml_string();
    section(&mut w, b"TOPO", topo.len() as u64)?;
    w.write_all(topo.as_bytes())?;
    let mode = model.mode().tag();
    section(&mut w, b"MODE", mode.len() as u64)?;
    w.write_all(mode.as_bytes())?;
    let tensors = model_tensors(model);
    let len: u64 = 4 + tensors.iter().map(|t| t.desc().record_len()).sum::<u64>();
    section(&mut w, b"TENS", len)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in &tensors {
        write_tensor(&mut w, t)?;
    }
    if let Weights::Integer(n) = model.weights() {
        let len: u64 = 4 + n.scales.keys().map(|id| 2 + id.len() as u64 + 5).sum::<u64>();
        section(&mut w, b"SCAL", len)?;
        w.write_all(&(n.scales.len() as u32).to_le_bytes())?;
        for (id, p) in &n.scales {
            write_str(&mut w, id)?;
            w.write_all(&[p.bits().bits() as u8])?;
            w.write_all(&p.scale().to_le_bytes())?;
        }
    }
    let crc = w.hasher.clone().finalize();
    w.inner.write_all(&crc.to_le_bytes())?;
    w.inner.flush()?;
    Ok(w.written + CHECKSUM_LEN)
}

pub fn save(model: &Model, path: &Path) -> Result<u64, ModelIoError> {
    let f = std::fs::File::create(path)?;
    write_model(model, io::BufWriter::new(f))
}

/// Exact serialized size, computed by serializing into a counting sink.
pub fn serialized_size(model: &Model) -> Result<u64, ModelIoError> {
    write_model(model, io::sink())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        if self.buf.len() - self.pos < n {
            return format_err(format!("unexpected end of data at offset {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelIoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelIoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32, ModelIoError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, ModelIoError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| ModelIoError::Format("invalid UTF-8 string".into()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Checks magic, checksum and version; returns the section bytes.
fn open_container<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<&'a [u8], ModelIoError> {
    let prefix = bytes.len().min(4);
    if bytes[..prefix] != magic[..prefix] {
        return format_err(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)));
    }
    if bytes.len() < (HEADER_LEN + CHECKSUM_LEN) as usize {
        return Err(ModelIoError::Checksum { stored: 0, computed: crc32fast::hash(bytes) });
    }
    let (body, tail) = bytes.split_at(bytes.len() - CHECKSUM_LEN as usize);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelIoError::Checksum { stored, computed });
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ModelIoError::UnsupportedVersion(version));
    }
    Ok(&body[HEADER_LEN as usize..])
}

fn sections(body: &[u8]) -> Result<BTreeMap<[u8; 4], &[u8]>, ModelIoError> {
    let mut r = Reader { buf: body, pos: 0 };
    let mut out = BTreeMap::new();
    while !r.done() {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u64()?;
        let payload = r.take(usize::try_from(len).map_err(|_| ModelIoError::Format("section too large".into()))?)?;
        if out.insert(tag, payload).is_some() {
            return format_err(format!("duplicate section {}", String::from_utf8_lossy(&tag)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
enum Values {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

struct TensorData {
    desc: TensorDesc,
    quant: Option<QuantParams>,
    ledger: Vec<u32>,
    values: Values,
}

fn read_tensor(r: &mut Reader<'_>) -> Result<TensorData, ModelIoError> {
    let id = r.string()?;
    let dtype = DType::from_code(r.u8()?)?;
    let layout_code = r.u8()?;
    let rank = r.u8()? as usize;
    let dims = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>, ModelIoError>>()?;
    let quant = match r.u8()? {
        0 => None,
        1 => {
            let bits = BitWidth::from_bits(r.u8()? as u32).map_err(|e| ModelIoError::Format(format!("{id}: {e}")))?;
            let scale = r.f32()?;
            Some(QuantParams::new(scale, bits).map_err(|e| ModelIoError::Format(format!("{id}: {e}")))?)
        }
        f => return format_err(format!("{id}: bad quantization flag {f}")),
    };
    let total: usize = dims.iter().product();
    let (layout, ledger, count) = match layout_code {
        0 => (LayoutDesc::Dense, Vec::new(), total),
        1 => {
            if rank != 2 {
                return format_err(format!("{id}: block-sparse tensor must be rank 2"));
            }
            let block = BlockShape::new(r.u32()? as usize, r.u32()? as usize)
                .map_err(|e| ModelIoError::Format(format!("{id}: {e}")))?;
            let width = r.u8()?;
            let n = r.u32()? as usize;
            let ledger = match width {
                2 => r.take(2 * n)?.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect(),
                4 => r.take(4 * n)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
                _ => return format_err(format!("{id}: bad ledger width {width}")),
            };
            let count = r.u32()? as usize;
            let block_rows = dims[0] / block.rows.max(1);
            let stored_blocks = n.saturating_sub(block_rows);
            (LayoutDesc::Bcsr { block, stored_blocks }, ledger, count)
        }
        c => return format_err(format!("{id}: unknown layout code {c}")),
    };
    let values = match dtype {
        DType::F32 => {
            Values::F32(r.take(4 * count)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        DType::I8 => Values::I8(r.take(count)?.iter().map(|&b| b as i8).collect()),
        DType::I32 => {
            Values::I32(r.take(4 * count)?.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
        }
    };
    Ok(TensorData { desc: TensorDesc { id, dtype, dims, quantized: quant.is_some(), layout }, quant, ledger, values })
}

struct Tensors(BTreeMap<String, TensorData>);

impl Tensors {
    fn take(&mut self, id: &str) -> TensorData {
        self.0.remove(id).expect("presence checked against the expected list")
    }

    fn f32_vec(&mut self, id: &str) -> Vec<f32> {
        match self.take(id).values {
            Values::F32(v) => v,
            _ => unreachable!("dtype checked"),
        }
    }

    fn quantized(&mut self, id: &str) -> QuantizedTensor {
        let t = self.take(id);
        let data = match t.values {
            Values::I8(v) => v.into_iter().map(|x| x as i32).collect(),
            Values::I32(v) => v,
            Values::F32(_) => unreachable!("dtype checked"),
        };
        QuantizedTensor { data, shape: t.desc.dims, params: t.quant.expect("quantization checked") }
    }

    fn linear(&mut self, id: &str) -> Result<Linear, ModelIoError> {
        let t = self.take(id);
        let Values::F32(v) = t.values else { unreachable!("dtype checked") };
        let (rows, cols) = (t.desc.dims[0], t.desc.dims[1]);
        Ok(match t.desc.layout {
            LayoutDesc::Dense => {
                Linear::Dense(Matrix::from_vec(rows, cols, v).map_err(|e| ModelIoError::Format(format!("{id}: {e}")))?)
            }
            LayoutDesc::Bcsr { block, .. } => Linear::Sparse(
                BlockSparseMatrix::from_parts(rows, cols, block, t.ledger, v)
                    .map_err(|e| ModelIoError::Format(format!("{id}: {e}")))?,
            ),
        })
    }

    fn qlinear(&mut self, id: &str) -> Result<QLinear, ModelIoError> {
        let t = self.take(id);
        let Values::I8(v) = t.values else { unreachable!("dtype checked") };
        let (rows, cols) = (t.desc.dims[0], t.desc.dims[1]);
        let weights = match t.desc.layout {
            LayoutDesc::Dense => {
                QMatrix::Dense(Matrix::from_vec(rows, cols, v).map_err(|e| ModelIoError::Format(format!("{id}: {e}")))?)
            }
            LayoutDesc::Bcsr { block, .. } => {
                let m = BlockSparseMatrix::from_parts(rows, cols, block, t.ledger, v)
                    .map_err(|e| ModelIoError::Format(format!("{id}: {e}")))?;
                m.check_accumulator_bound().map_err(|e| ModelIoError::Format(format!("{id}: {e}")))?;
                QMatrix::Sparse(m)
            }
        };
        QLinear::from_parts(weights, t.quant.expect("quantization checked"))
            .map_err(|e| ModelIoError::Format(format!("{id}: {e}")))
    }
}

trait LoadMatrix: Sized {
    fn load(t: &mut Tensors, id: &str) -> Result<Self, ModelIoError>;
}

impl LoadMatrix for Linear {
    fn load(t: &mut Tensors, id: &str) -> Result<Self, ModelIoError> {
        t.linear(id)
    }
}

impl LoadMatrix for QLinear {
    fn load(t: &mut Tensors, id: &str) -> Result<Self, ModelIoError> {
        t.qlinear(id)
    }
}

fn load_float_cell<L: LoadMatrix>(t: &mut Tensors, name: &str, l: &LayerSpec) -> Result<Cell<L>, ModelIoError> {
    let mut gate = |g: &str| -> Result<Gate<L>, ModelIoError> {
        let p = format!("{name}.{g}");
        Ok(Gate {
            input: L::load(t, &format!("{p}.W"))?,
            recurrent: if l.cell == CellKind::Sru { None } else { Some(L::load(t, &format!("{p}.R"))?) },
            bias: t.f32_vec(&format!("{p}.b")),
            norm_gain: gate_normalized(l, g).then(|| t.f32_vec(&format!("{p}.ln_gain"))),
        })
    };
    let cell = match l.cell {
        CellKind::Lstm => {
            let (i, f, z, o) = (gate("input_gate")?, gate("forget_gate")?, gate("cell_input")?, gate("output_gate")?);
            Cell::Lstm(LstmWeights {
                input_gate: i,
                forget_gate: f,
                cell_input: z,
                output_gate: o,
                projection: L::load(t, &format!("{name}.projection"))?,
            })
        }
        CellKind::Cifg => {
            let (f, z, o) = (gate("forget_gate")?, gate("cell_input")?, gate("output_gate")?);
            Cell::Cifg(CifgWeights {
                forget_gate: f,
                cell_input: z,
                output_gate: o,
                projection: L::load(t, &format!("{name}.projection"))?,
            })
        }
        CellKind::Sru => {
            let (f, r, x1, x2) = (gate("forget_gate")?, gate("reset_gate")?, gate("x1")?, gate("x2")?);
            let cell_norm = l.layer_norm.then(|| LayerNormParams {
                gain: t.f32_vec(&format!("{name}.cell_norm.gain")),
                bias: t.f32_vec(&format!("{name}.cell_norm.bias")),
                epsilon: LN_EPSILON,
                enabled: true,
            });
            Cell::Sru(SruWeights {
                forget_gate: f,
                reset_gate: r,
                x1,
                x2,
                cell_norm,
                projection: L::load(t, &format!("{name}.projection"))?,
            })
        }
    };
    Ok(cell)
}

fn load_integer_cell(t: &mut Tensors, name: &str, l: &LayerSpec) -> Result<IntegerCellWeights, ModelIoError> {
    let fmt = |e: crate::fixedpoint::QuantError| ModelIoError::Format(format!("{name}: {e}"));
    let mut gates = Vec::new();
    for g in gate_names(l.cell) {
        let p = format!("{name}.{g}");
        let input = t.qlinear(&format!("{p}.W"))?;
        let recurrent = if l.cell == CellKind::Sru { None } else { Some(t.qlinear(&format!("{p}.R"))?) };
        let tail = if gate_normalized(l, g) {
            let gain = t.quantized(&format!("{p}.ln_gain"));
            GateTail::Norm(IntLayerNorm::new(gain, t.quantized(&format!("{p}.b"))).map_err(fmt)?)
        } else {
            GateTail::Bias(t.quantized(&format!("{p}.b")))
        };
        gates.push(IntGateWeights { input, recurrent, tail });
    }
    let cell_norm = if l.cell == CellKind::Sru && l.layer_norm {
        let gain = t.quantized(&format!("{name}.cell_norm.gain"));
        Some(IntLayerNorm::new(gain, t.quantized(&format!("{name}.cell_norm.bias"))).map_err(fmt)?)
    } else {
        None
    };
    Ok(IntegerCellWeights { kind: l.cell, gates, cell_norm, projection: t.qlinear(&format!("{name}.projection"))? })
}

fn load_joint<L: LoadMatrix>(t: &mut Tensors) -> Result<Joint<L>, ModelIoError> {
    Ok(Joint {
        enc_proj: L::load(t, "joint.enc_proj")?,
        pred_proj: L::load(t, "joint.pred_proj")?,
        bias: t.f32_vec("joint.bias"),
        output: L::load(t, "joint.output")?,
        output_bias: t.f32_vec("joint.output_bias"),
    })
}

fn desc_matches(found: &TensorDesc, want: &TensorDesc) -> bool {
    let layout = match (found.layout, want.layout) {
        (LayoutDesc::Dense, LayoutDesc::Dense) => true,
        (LayoutDesc::Bcsr { block: a, .. }, LayoutDesc::Bcsr { block: b, .. }) => a == b,
        _ => false,
    };
    layout && found.dtype == want.dtype && found.dims == want.dims && found.quantized == want.quantized
}

/// Parses a model file held in memory.
pub fn read_model(bytes: &[u8]) -> Result<Model, ModelIoError> {
    let body = open_container(bytes, MODEL_MAGIC)?;
    let secs = sections(body)?;
    let get = |tag: &[u8; 4]| {
        secs.get(tag)
            .copied()
            .ok_or_else(|| ModelIoError::Format(format!("missing section {}", String::from_utf8_lossy(tag))))
    };
    let topo_text =
        std::str::from_utf8(get(b"TOPO")?).map_err(|_| ModelIoError::Format("topology is not UTF-8".into()))?;
    let topology = TopologyConfig::from_toml_str(topo_text).map_err(|e| ModelIoError::Format(e.to_string()))?;
    let mode_text = std::str::from_utf8(get(b"MODE")?).unwrap_or("");
    let mode = QuantMode::from_tag(mode_text)
        .ok_or_else(|| ModelIoError::Format(format!("unknown quantization mode {mode_text:?}")))?;

    let mut r = Reader { buf: get(b"TENS")?, pos: 0 };
    let count = r.u32()?;
    let mut found = BTreeMap::new();
    for _ in 0..count {
        let t = read_tensor(&mut r)?;
        let id = t.desc.id.clone();
        if found.insert(id.clone(), t).is_some() {
            return Err(ModelIoError::DuplicateTensor(id));
        }
    }
    if !r.done() {
        return format_err("trailing bytes in tensor section");
    }
    let expected = expected_tensors(&topology, mode);
    let missing: Vec<String> = expected.iter().filter(|d| !found.contains_key(&d.id)).map(|d| d.id.clone()).collect();
    if !missing.is_empty() {
        return Err(ModelIoError::MissingTensor(missing));
    }
    for want in &expected {
        let got = &found[&want.id].desc;
        if !desc_matches(got, want) {
            return format_err(format!("{}: stored as {got:?}, topology expects {want:?}", want.id));
        }
    }
    if found.len() != expected.len() {
        let known: std::collections::BTreeSet<&str> = expected.iter().map(|d| d.id.as_str()).collect();
        let extra: Vec<&String> = found.keys().filter(|k| !known.contains(k.as_str())).collect();
        return format_err(format!("unexpected tensors: {extra:?}"));
    }
    let mut t = Tensors(found);

    let embedding = match mode {
        QuantMode::Float32 => {
            let e = t.take("embedding");
            let Values::F32(v) = e.values else { unreachable!("dtype checked") };
            Embedding::Float(
                Matrix::from_vec(e.desc.dims[0], e.desc.dims[1], v).map_err(|e| ModelIoError::Format(e.to_string()))?,
            )
        }
        _ => {
            let e = t.take("embedding");
            let Values::I8(v) = e.values else { unreachable!("dtype checked") };
            Embedding::Quantized {
                table: Matrix::from_vec(e.desc.dims[0], e.desc.dims[1], v)
                    .map_err(|e| ModelIoError::Format(e.to_string()))?,
                params: e.quant.expect("quantization checked"),
            }
        }
    };
    let layers = topology.named_layers();
    let ne = topology.encoder.layers.len();
    let weights = match mode {
        QuantMode::Float32 | QuantMode::Hybrid8 => {
            macro_rules! network {
                ($l:ty) => {{
                    let mut cells: Vec<Cell<$l>> = Vec::new();
                    for (name, l) in &layers {
                        cells.push(load_float_cell::<$l>(&mut t, name, l)?);
                    }
                    let prediction = cells.split_off(ne);
                    Network { encoder: cells, prediction, joint: load_joint::<$l>(&mut t)? }
                }};
            }
            if mode == QuantMode::Float32 {
                Weights::Float(network!(Linear))
            } else {
                Weights::Hybrid(network!(QLinear))
            }
        }
        QuantMode::Integer8_16 => {
            let mut cells = Vec::new();
            for (name, l) in &layers {
                cells.push(load_integer_cell(&mut t, name, l)?);
            }
            let prediction = cells.split_off(ne);
            let scales = read_scales(get(b"SCAL")?)?;
            let Embedding::Quantized { params, .. } = &embedding else {
                unreachable!("integer embedding is quantized")
            };
            let joint = load_joint::<QLinear>(&mut t)?;
            Weights::Integer(
                IntegerNetwork::build(cells, prediction, *params, joint, scales).map_err(ModelError::from)?,
            )
        }
    };
    Ok(Model::from_parts(topology, embedding, weights)?)
}

fn read_scales(bytes: &[u8]) -> Result<ScaleMap, ModelIoError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let n = r.u32()?;
    let mut m = ScaleMap::new();
    for _ in 0..n {
        let id = r.string()?;
        let bits = BitWidth::from_bits(r.u8()? as u32).map_err(|e| ModelIoError::Format(format!("{id}: {e}")))?;
        let scale = r.f32()?;
        m.insert(id.clone(), QuantParams::new(scale, bits).map_err(|e| ModelIoError::Format(format!("{id}: {e}")))?);
    }
    if !r.done() {
        return format_err("trailing bytes in scale section");
    }
    Ok(m)
}

pub fn load(path: &Path) -> Result<Model, ModelIoError> {
    read_model(&std::fs::read(path)?)
}

/// Serializes calibration ranges into a standalone stats file.
pub fn write_stats<W: Write>(obs: &RangeObserver, w: W) -> Result<u64, ModelIoError> {
    let mut w = CrcWriter { inner: w, hasher: crc32fast::Hasher::new(), written: 0 };
    w.write_all(STATS_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let len: u64 = 4 + obs.ranges().keys().map(|id| 2 + id.len() as u64 + 1 + 12 + 8).sum::<u64>();
    section(&mut w, b"RANG", len)?;
    w.write_all(&(obs.ranges().len() as u32).to_le_bytes())?;
    for (id, r) in obs.ranges() {
        write_str(&mut w, id)?;
        w.write_all(&[r.bits.bits() as u8])?;
        for v in [r.min, r.max, r.max_abs] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&r.count.to_le_bytes())?;
    }
    let crc = w.hasher.clone().finalize();
    w.inner.write_all(&crc.to_le_bytes())?;
    w.inner.flush()?;
    Ok(w.written + CHECKSUM_LEN)
}

pub fn read_stats(bytes: &[u8]) -> Result<RangeObserver, ModelIoError> {
    let body = open_container(bytes, STATS_MAGIC)?;
    let secs = sections(body)?;
    let data = secs.get(b"RANG").ok_or_else(|| ModelIoError::Format("missing section RANG".into()))?;
    let mut r = Reader { buf: data, pos: 0 };
    let n = r.u32()?;
    let mut ranges = BTreeMap::new();
    for _ in 0..n {
        let id = r.string()?;
        let bits = BitWidth::from_bits(r.u8()? as u32).map_err(|e| ModelIoError::Format(format!("{id}: {e}")))?;
        let (min, max, max_abs) = (r.f32()?, r.f32()?, r.f32()?);
        let count = r.u64()?;
        ranges.insert(id, TensorRange { bits, min, max, max_abs, count });
    }
    Ok(RangeObserver::from_ranges(ranges))
}

pub fn save_stats(obs: &RangeObserver, path: &Path) -> Result<u64, ModelIoError> {
    write_stats(obs, io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_stats(path: &Path) -> Result<RangeObserver, ModelIoError> {
    read_stats(&std::fs::read(path)?)
}
