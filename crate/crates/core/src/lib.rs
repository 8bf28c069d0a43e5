//! Block-sparse, quantized recurrent-network inference.

pub mod bench;
pub mod blocksparse;
pub mod calibrate;
pub mod cells;
pub mod compare;
pub mod features;
pub mod fixedpoint;
pub mod linear;
pub mod matrix;
pub mod modelio;
pub mod pruning;
pub mod quant;
pub mod rnnt;
mod simd;
pub mod train;

pub use blocksparse::{BlockShape, BlockSparseMatrix};
pub use calibrate::{RangeObserver, ScaleMap};
pub use cells::{Cell, CellKind, CellState};
pub use features::Utterance;
pub use fixedpoint::{BitWidth, QuantParams, QuantizedTensor};
pub use linear::{Linear, MatVec};
pub use matrix::Matrix;
pub use modelio::{ModelIoError, TopologyConfig};
pub use pruning::{PruningSchedule, PruningState};
pub use rnnt::{Model, ModelError, QuantMode};
