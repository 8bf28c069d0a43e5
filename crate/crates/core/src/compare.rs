//! Divergence between two models of the same shape.

use serde::Serialize;
use thiserror::Error;

use crate::features::Utterance;
use crate::modelio::{LayerSpec, TopologyConfig};
use crate::rnnt::{Model, ModelError};

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("topology mismatch: {0}")]
    Topology(String),

    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDelta {
    pub layer: String,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub values: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceAgreement {
    pub id: String,
    pub tokens_a: usize,
    pub tokens_b: usize,
    pub edit_distance: usize,
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub mode_a: String,
    pub mode_b: String,
    pub layers: Vec<LayerDelta>,
    /// `1 − Σ edit distance / Σ max(len_a, len_b)`; 1 when both decode nothing.
    pub agreement: f64,
    pub utterances: Vec<UtteranceAgreement>,
}

/// Levenshtein distance between two token sequences.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    strsim::generic_levenshtein(&a.to_vec(), &b.to_vec())
}

/// Token agreement of two decodes: one minus the normalized edit distance.
pub fn token_agreement(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        1.0
    } else {
        1.0 - edit_distance(a, b) as f64 / n as f64
    }
}

fn layer_shape(l: &LayerSpec) -> (crate::cells::CellKind, usize, usize, usize, bool) {
    (l.cell, l.input, l.hidden, l.projection, l.layer_norm)
}

/// Checks that two topologies describe the same network up to sparsity.
pub fn check_same_shape(a: &TopologyConfig, b: &TopologyConfig) -> Result<(), CompareError> {
    let mismatch = |what: &str| Err(CompareError::Topology(what.to_string()));
    if a.feature_width != b.feature_width {
        return mismatch("feature width");
    }
    if a.vocab_size != b.vocab_size || a.embedding_width != b.embedding_width {
        return mismatch("vocabulary or embedding");
    }
    if a.joint != b.joint {
        return mismatch("joint network");
    }
    if a.encoder.time_reduction != b.encoder.time_reduction {
        return mismatch("time reduction");
    }
    let (la, lb) = (a.named_layers(), b.named_layers());
    if la.len() != lb.len() || a.encoder.layers.len() != b.encoder.layers.len() {
        return mismatch("layer count");
    }
    for ((name, x), (_, y)) in la.iter().zip(&lb) {
        if layer_shape(x) != layer_shape(y) {
            return Err(CompareError::Topology(format!("layer {name}")));
        }
    }
    Ok(())
}

/// Per-layer output deltas and decode agreement.
///
/// Both prediction networks are fed the tokens decoded by `a`, so the layer
/// deltas compare like with like.
pub fn compare(
    a: &Model,
    b: &Model,
    utterances: &[Utterance],
    max_symbols_per_frame: usize,
) -> Result<CompareReport, CompareError> {
    check_same_shape(a.topology(), b.topology())?;
    let mut sums: Vec<(String, f64, f64, usize)> = Vec::new();
    let mut per_utt = Vec::with_capacity(utterances.len());
    let (mut dist, mut total) = (0usize, 0usize);
    for (i, u) in utterances.iter().enumerate() {
        let ta = a.greedy_decode(&u.frames, max_symbols_per_frame)?;
        let tb = b.greedy_decode(&u.frames, max_symbols_per_frame)?;
        let oa = a.layer_outputs(&u.frames, &ta)?;
        let ob = b.layer_outputs(&u.frames, &ta)?;
        if sums.is_empty() {
            sums = oa.iter().map(|(n, _)| (n.clone(), 0.0, 0.0, 0)).collect();
        }
        for (acc, ((_, xa), (_, xb))) in sums.iter_mut().zip(oa.iter().zip(&ob)) {
            for (va, vb) in xa.iter().flatten().zip(xb.iter().flatten()) {
                let d = (*va as f64 - *vb as f64).abs();
                acc.1 = acc.1.max(d);
                acc.2 += d;
                acc.3 += 1;
            }
        }
        let d = edit_distance(&ta, &tb);
        let n = ta.len().max(tb.len());
        dist += d;
        total += n;
        per_utt.push(UtteranceAgreement {
            id: u.id.clone().unwrap_or_else(|| format!("#{i}")),
            tokens_a: ta.len(),
            tokens_b: tb.len(),
            edit_distance: d,
            agreement: token_agreement(&ta, &tb),
        });
    }
    Ok(CompareReport {
        mode_a: a.mode().tag().into(),
        mode_b: b.mode().tag().into(),
        layers: sums
            .into_iter()
            .map(|(layer, max_abs, sum, values)| LayerDelta {
                layer,
                max_abs,
                mean_abs: if values == 0 { 0.0 } else { sum / values as f64 },
                values,
            })
            .collect(),
        agreement: if total == 0 { 1.0 } else { 1.0 - dist as f64 / total as f64 },
        utterances: per_utt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::calibrate_model;
    use crate::cells::CellKind;
    use crate::rnnt::DEFAULT_MAX_SYMBOLS_PER_FRAME;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn utterances(t: &TopologyConfig, n: usize, seed: u64) -> Vec<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let frames =
                    (0..12).map(|_| (0..t.feature_width).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                Utterance::new(frames, 0.01).unwrap()
            })
            .collect()
    }

    #[test]
    fn agreement_examples() {
        assert_eq!(token_agreement(&[], &[]), 1.0);
        assert_eq!(token_agreement(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(token_agreement(&[1, 2, 3], &[]), 0.0);
        assert!((token_agreement(&[1, 2, 3, 4], &[1, 3, 4]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn self_comparison_is_exact() {
        let t = TopologyConfig::tiny(CellKind::Lstm);
        let m = Model::random(&t, 5).unwrap();
        let us = utterances(&t, 3, 1);
        let scales =
            calibrate_model(&m, &us.iter().map(|u| u.frames.clone()).collect::<Vec<_>>()).unwrap().finalize().unwrap();
        for model in [m.clone(), m.to_integer(&scales).unwrap()] {
            let r = compare(&model, &model, &us, DEFAULT_MAX_SYMBOLS_PER_FRAME).unwrap();
            assert_eq!(r.agreement, 1.0);
            assert_eq!(r.layers.len(), 5);
            assert!(r.layers.iter().all(|l| l.max_abs == 0.0 && l.values > 0));
        }
    }

    #[test]
    fn hybrid_reports_small_deltas() {
        let t = TopologyConfig::tiny(CellKind::Cifg);
        let m = Model::random(&t, 6).unwrap();
        let us = utterances(&t, 3, 2);
        let r = compare(&m, &m.to_hybrid().unwrap(), &us, DEFAULT_MAX_SYMBOLS_PER_FRAME).unwrap();
        assert!(r.layers.iter().all(|l| l.max_abs > 0.0 && l.max_abs < 0.1), "{:?}", r.layers);
    }

    #[test]
    fn zero_model_disagrees() {
        let t = TopologyConfig::tiny(CellKind::Lstm);
        let m = Model::random(&t, 5).unwrap();
        let us = utterances(&t, 3, 3);
        let r = compare(&m, &Model::zeros(&t).unwrap(), &us, DEFAULT_MAX_SYMBOLS_PER_FRAME).unwrap();
        assert!(r.utterances.iter().all(|u| u.tokens_b == 0));
        assert!(r.utterances.iter().any(|u| u.tokens_a > 0));
        assert!(r.agreement < 0.05);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Model::random(&TopologyConfig::tiny(CellKind::Lstm), 1).unwrap();
        let b = Model::random(&TopologyConfig::tiny(CellKind::Sru), 1).unwrap();
        assert!(matches!(compare(&a, &b, &[], 10), Err(CompareError::Topology(_))));
        let sparse = a.prune(0.5, crate::blocksparse::BlockShape::new(4, 1).unwrap()).unwrap();
        assert!(compare(&a, &sparse, &[], 10).is_ok());
    }
}
