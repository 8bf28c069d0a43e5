//! Topology description, parameter counting and the binary model file format.

mod format;
mod topology;

pub use format::{
    expected_tensors, file_size_estimate, load, load_stats, read_model, read_stats, save, save_stats, serialized_size,
    write_model, write_stats, DType, LayoutDesc, ModelIoError, TensorDesc, FORMAT_VERSION, MODEL_MAGIC, STATS_MAGIC,
};
pub use topology::{
    count_params, EncoderSpec, JointActivation, JointSpec, LayerCount, LayerSpec, ParamCount, PredictionSpec,
    TimeReduction, TopologyConfig, TopologyError,
};
