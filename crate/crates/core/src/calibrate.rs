//! Dynamic-range calibration for integer quantization.
//!
//! The float model is run over calibration data while every dynamic tensor
//! (gate pre-activations, cell states, projection inputs, layer outputs and the
//! encoder input) is observed. The running max-abs of each tensor becomes its
//! fixed scale in the integer model.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::cells::CellKind;
use crate::fixedpoint::{BitWidth, QuantError, QuantParams};
use crate::modelio::TopologyConfig;
use crate::rnnt::{model_dynamic_tensors, Model, ModelError, DEFAULT_MAX_SYMBOLS_PER_FRAME};

/// Calibrated scale of every dynamic tensor, by tensor id.
pub type ScaleMap = BTreeMap<String, QuantParams>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("tensor {tensor}: non-finite value {value} at index {index}")]
    NonFinite { tensor: String, index: usize, value: f32 },

    #[error("tensor {0} is not registered")]
    Unregistered(String),

    #[error("tensor {tensor} registered as both {a} and {b}")]
    WidthConflict { tensor: String, a: BitWidth, b: BitWidth },

    #[error("no observations for: {}", .0.join(", "))]
    Unobserved(Vec<String>),

    #[error("calibration dataset is empty")]
    EmptyDataset,

    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Id of a per-layer tensor, e.g. `encoder.3.forget_gate.pre`.
pub fn cell_tensor_id(layer: &str, name: &str) -> String {
    format!("{layer}.{name}")
}

/// Dynamic tensors of one cell and their integer widths.
pub fn cell_dynamic_tensors(kind: CellKind, layer: &str) -> Vec<(String, BitWidth)> {
    let mut v: Vec<(String, BitWidth)> = crate::quant::gate_names(kind)
        .iter()
        .map(|g| (cell_tensor_id(layer, &format!("{g}.pre")), BitWidth::W16))
        .collect();
    v.push((cell_tensor_id(layer, "cell"), BitWidth::W16));
    v.push((cell_tensor_id(layer, "proj_input"), BitWidth::W8));
    v.push((cell_tensor_id(layer, "output"), BitWidth::W8));
    v
}

/// Observed range of one tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorRange {
    pub bits: BitWidth,
    pub min: f32,
    pub max: f32,
    pub max_abs: f32,
    pub count: u64,
}

impl TensorRange {
    fn empty(bits: BitWidth) -> Self {
        Self { bits, min: f32::INFINITY, max: f32::NEG_INFINITY, max_abs: 0.0, count: 0 }
    }
}

/// Running per-tensor ranges. Observers merge with max semantics, so shards
/// can be calibrated independently and combined in any order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RangeObserver {
    ranges: BTreeMap<String, TensorRange>,
}

impl RangeObserver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a tensor and the width its scale is computed for.
    pub fn register(&mut self, id: &str, bits: BitWidth) {
        self.ranges.entry(id.to_string()).or_insert_with(|| TensorRange::empty(bits));
    }

    pub fn observe(&mut self, id: &str, values: &[f32]) -> Result<(), CalibrationError> {
        let r = self.ranges.get_mut(id).ok_or_else(|| CalibrationError::Unregistered(id.to_string()))?;
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(CalibrationError::NonFinite { tensor: id.to_string(), index, value: values[index] });
        }
        for &v in values {
            r.min = r.min.min(v);
            r.max = r.max.max(v);
            r.max_abs = r.max_abs.max(v.abs());
        }
        r.count += 1;
        Ok(())
    }

    pub fn range(&self, id: &str) -> Option<&TensorRange> {
        self.ranges.get(id)
    }

    pub fn ranges(&self) -> &BTreeMap<String, TensorRange> {
        &self.ranges
    }

    /// Rebuilds an observer from stored ranges.
    pub fn from_ranges(ranges: BTreeMap<String, TensorRange>) -> Self {
        Self { ranges }
    }

    pub fn merge(&mut self, other: &RangeObserver) -> Result<(), CalibrationError> {
        for (id, o) in &other.ranges {
            let r = self.ranges.entry(id.clone()).or_insert_with(|| TensorRange::empty(o.bits));
            if r.bits != o.bits {
                return Err(CalibrationError::WidthConflict { tensor: id.clone(), a: r.bits, b: o.bits });
            }
            r.min = r.min.min(o.min);
            r.max = r.max.max(o.max);
            r.max_abs = r.max_abs.max(o.max_abs);
            r.count += o.count;
        }
        Ok(())
    }

    /// `scale = max_abs / (2^(b-1) - 1)` per tensor (1 for an all-zero range).
    pub fn finalize(&self) -> Result<ScaleMap, CalibrationError> {
        let missing: Vec<String> = self.ranges.iter().filter(|(_, r)| r.count == 0).map(|(id, _)| id.clone()).collect();
        if !missing.is_empty() {
            return Err(CalibrationError::Unobserved(missing));
        }
        self.ranges.iter().map(|(id, r)| Ok((id.clone(), QuantParams::from_max_abs(r.max_abs, r.bits)?))).collect()
    }
}

/// Observer with every dynamic tensor of `model`'s topology registered.
pub fn observer_for(t: &TopologyConfig) -> RangeObserver {
    let mut o = RangeObserver::new();
    for (id, bits) in model_dynamic_tensors(t) {
        o.register(&id, bits);
    }
    o
}

/// Runs float greedy decoding over `dataset`, observing every dynamic tensor.
pub fn calibrate_model(model: &Model, dataset: &[Vec<Vec<f32>>]) -> Result<RangeObserver, ModelError> {
    calibrate_model_with(model, dataset, DEFAULT_MAX_SYMBOLS_PER_FRAME)
}

pub fn calibrate_model_with(
    model: &Model,
    dataset: &[Vec<Vec<f32>>],
    max_symbols_per_frame: usize,
) -> Result<RangeObserver, ModelError> {
    if dataset.iter().all(|u| u.is_empty()) {
        return Err(CalibrationError::EmptyDataset.into());
    }
    let mut obs = observer_for(model.topology());
    for frames in dataset.iter().filter(|u| !u.is_empty()) {
        model.observe_utterance(frames, max_symbols_per_frame, &mut obs)?;
    }
    Ok(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn observe_and_finalize() {
        let mut o = RangeObserver::new();
        o.register("a", BitWidth::W8);
        o.observe("a", &[0.0, 0.0]).unwrap();
        assert_eq!(o.range("a").unwrap().max_abs, 0.0);
        assert_eq!(o.finalize().unwrap()["a"].scale(), 1.0);
        o.observe("a", &[-3.0, 2.0]).unwrap();
        o.observe("a", &[1.0]).unwrap();
        assert_eq!(o.range("a").unwrap().max_abs, 3.0);

        let mut p = RangeObserver::new();
        p.register("b", BitWidth::W8);
        p.register("c", BitWidth::W16);
        p.observe("b", &[12.7]).unwrap();
        p.observe("c", &[-5.0]).unwrap();
        let s = p.finalize().unwrap();
        assert!((s["b"].scale() - 0.1).abs() < 1e-7);
        assert_eq!(s["c"].scale(), (5.0f64 / 32767.0) as f32);
    }

    #[test]
    fn errors() {
        let mut o = RangeObserver::new();
        o.register("x", BitWidth::W8);
        o.register("y", BitWidth::W8);
        assert!(matches!(o.observe("z", &[1.0]), Err(CalibrationError::Unregistered(_))));
        match o.observe("x", &[1.0, f32::NAN]) {
            Err(CalibrationError::NonFinite { tensor, index: 1, .. }) => assert_eq!(tensor, "x"),
            other => panic!("{other:?}"),
        }
        o.observe("x", &[1.0]).unwrap();
        assert_eq!(o.finalize(), Err(CalibrationError::Unobserved(vec!["y".into()])));
    }

    #[test]
    fn max_abs_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut o = RangeObserver::new();
        o.register("t", BitWidth::W16);
        let mut all = Vec::new();
        for _ in 0..1000 {
            let v: Vec<f32> = (0..rng.gen_range(1..20)).map(|_| rng.gen_range(-50.0f32..50.0)).collect();
            o.observe("t", &v).unwrap();
            all.extend(v);
        }
        let m = all.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert_eq!(o.range("t").unwrap().max_abs, m);
    }

    #[test]
    fn calibration_covers_conversion() {
        use crate::cells::CellKind;
        for kind in [CellKind::Lstm, CellKind::Cifg, CellKind::Sru] {
            let t = TopologyConfig::tiny(kind);
            let m = Model::random(&t, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let data: Vec<Vec<Vec<f32>>> = (0..2)
                .map(|_| (0..9).map(|_| (0..8).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).collect())
                .collect();
            let obs = calibrate_model(&m, &data).unwrap();
            let ids: Vec<&String> = obs.ranges().keys().collect();
            let required: Vec<String> = model_dynamic_tensors(&t).into_iter().map(|(id, _)| id).collect();
            let mut required_sorted: Vec<&String> = required.iter().collect();
            required_sorted.sort();
            assert_eq!(ids, required_sorted);
            m.to_integer(&obs.finalize().unwrap()).unwrap();
        }
        let m = Model::random(&TopologyConfig::tiny(CellKind::Lstm), 3).unwrap();
        assert!(matches!(calibrate_model(&m, &[]), Err(ModelError::Calibration(CalibrationError::EmptyDataset))));
    }

    #[test]
    fn zero_utterance_scales() {
        use crate::cells::CellKind;
        let t = TopologyConfig::tiny(CellKind::Lstm);
        let m = Model::random(&t, 3).unwrap();
        let obs = calibrate_model(&m, &[vec![vec![0.0; 8]; 4]]).unwrap();
        let s = obs.finalize().unwrap();
        assert_eq!(s["encoder.input"].scale(), 1.0);
        // biases still drive the gates
        assert_ne!(s["encoder.0.output"].scale(), 1.0);
    }

    proptest! {
        #[test]
        fn merge_order_does_not_matter(shards in prop::collection::vec(prop::collection::vec(-100.0f32..100.0, 1..10), 1..6)) {
            let observers: Vec<RangeObserver> = shards.iter().map(|s| {
                let mut o = RangeObserver::new();
                o.register("t", BitWidth::W8);
                o.observe("t", s).unwrap();
                o
            }).collect();
            let mut fwd = RangeObserver::new();
            for o in &observers { fwd.merge(o).unwrap(); }
            let mut rev = RangeObserver::new();
            for o in observers.iter().rev() { rev.merge(o).unwrap(); }
            prop_assert_eq!(fwd.finalize().unwrap(), rev.finalize().unwrap());
        }
    }
}
