//! Real-time factor measurement.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::features::Utterance;
use crate::rnnt::{Model, ModelError, DEFAULT_MAX_SYMBOLS_PER_FRAME};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no utterances to benchmark")]
    EmptyInput,

    #[error("utterance {0} has no frames")]
    EmptyUtterance(String),

    #[error("percentile must be in (0, 1], got {0}")]
    Percentile(f64),

    #[error("repetitions must be at least 1")]
    Repetitions,

    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub repetitions: usize,
    /// Passes over the whole set run before timing starts.
    pub warmup: usize,
    pub percentile: f64,
    pub max_symbols_per_frame: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { repetitions: 1, warmup: 1, percentile: 0.9, max_symbols_per_frame: DEFAULT_MAX_SYMBOLS_PER_FRAME }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceTiming {
    pub id: String,
    pub frames: usize,
    pub audio_seconds: f64,
    /// Mean over repetitions.
    pub wall_seconds: f64,
    pub rt: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub mode: String,
    pub stored_params: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub percentile: f64,
    pub rt_percentile: f64,
    pub rt_mean: f64,
    pub rt_max: f64,
    pub utterances: Vec<UtteranceTiming>,
}

/// Nearest-rank percentile: the smallest value with at least `p·N` values at or below it.
pub fn nearest_rank(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(p > 0.0 && p <= 1.0) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

impl BenchReport {
    pub fn from_timings(
        mode: &str,
        stored_params: usize,
        utterances: Vec<UtteranceTiming>,
        cfg: &BenchConfig,
    ) -> Result<Self, BenchError> {
        let rts: Vec<f64> = utterances.iter().map(|u| u.rt).collect();
        let rt_percentile = nearest_rank(&rts, cfg.percentile).ok_or(if rts.is_empty() {
            BenchError::EmptyInput
        } else {
            BenchError::Percentile(cfg.percentile)
        })?;
        Ok(Self {
            mode: mode.to_string(),
            stored_params,
            repetitions: cfg.repetitions,
            warmup: cfg.warmup,
            percentile: cfg.percentile,
            rt_percentile,
            rt_mean: rts.iter().sum::<f64>() / rts.len() as f64,
            rt_max: rts.iter().copied().fold(f64::MIN, f64::max),
            utterances,
        })
    }
}

impl UtteranceTiming {
    pub fn new(id: String, frames: usize, frame_duration: f32, wall_seconds: f64, tokens: usize) -> Self {
        let audio_seconds = frames as f64 * frame_duration as f64;
        Self { id, frames, audio_seconds, wall_seconds, rt: wall_seconds / audio_seconds, tokens }
    }
}

/// Times greedy decoding of each utterance. Only the decode call is timed.
pub fn bench(model: &Model, utterances: &[Utterance], cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if utterances.is_empty() {
        return Err(BenchError::EmptyInput);
    }
    if cfg.repetitions == 0 {
        return Err(BenchError::Repetitions);
    }
    if !(cfg.percentile > 0.0 && cfg.percentile <= 1.0) {
        return Err(BenchError::Percentile(cfg.percentile));
    }
    let name = |i: usize, u: &Utterance| u.id.clone().unwrap_or_else(|| format!("#{i}"));
    for (i, u) in utterances.iter().enumerate() {
        if u.frames.is_empty() {
            return Err(BenchError::EmptyUtterance(name(i, u)));
        }
    }
    for _ in 0..cfg.warmup {
        for u in utterances {
            model.greedy_decode(&u.frames, cfg.max_symbols_per_frame)?;
        }
    }
    let mut timings = Vec::with_capacity(utterances.len());
    for (i, u) in utterances.iter().enumerate() {
        let mut total = 0.0;
        let mut tokens = 0;
        for _ in 0..cfg.repetitions {
            let start = Instant::now();
            let out = model.greedy_decode(&u.frames, cfg.max_symbols_per_frame)?;
            total += start.elapsed().as_secs_f64();
            tokens = out.len();
        }
        timings.push(UtteranceTiming::new(
            name(i, u),
            u.frames.len(),
            u.frame_duration,
            total / cfg.repetitions as f64,
            tokens,
        ));
    }
    BenchReport::from_timings(model.mode().tag(), model.stored_params(), timings, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::modelio::TopologyConfig;
    use proptest::prelude::*;

    fn timing(rt: f64) -> UtteranceTiming {
        UtteranceTiming::new("u".into(), 100, 0.01, rt, 0)
    }

    #[test]
    fn rt_is_wall_over_audio() {
        let t = UtteranceTiming::new("u".into(), 1000, 0.01, 5.0, 0);
        assert!((t.audio_seconds - 10.0).abs() < 1e-6);
        assert!((t.rt - 0.5).abs() < 1e-6);
    }

    #[test]
    fn nearest_rank_examples() {
        let one_to_ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank(&one_to_ten, 0.9), Some(9.0));
        assert_eq!(nearest_rank(&one_to_ten, 1.0), Some(10.0));
        assert_eq!(nearest_rank(&one_to_ten, 0.05), Some(1.0));
        assert_eq!(nearest_rank(&[2.5; 7], 0.9), Some(2.5));
        assert_eq!(nearest_rank(&[], 0.9), None);
        assert_eq!(nearest_rank(&[1.0], 0.0), None);
    }

    #[test]
    fn report_aggregates() {
        let r = BenchReport::from_timings(
            "float32",
            0,
            (1..=10).map(|v| timing(v as f64)).collect(),
            &BenchConfig::default(),
        )
        .unwrap();
        assert!((r.rt_percentile - 9.0).abs() < 1e-6);
        assert!((r.rt_mean - 5.5).abs() < 1e-6);
        assert!((r.rt_max - 10.0).abs() < 1e-6);
    }

    #[test]
    fn bench_runs_and_validates() {
        let t = TopologyConfig::tiny(CellKind::Lstm);
        let m = Model::random(&t, 1).unwrap();
        let u = Utterance::new(vec![vec![0.1; t.feature_width]; 12], 0.01).unwrap();
        let cfg = BenchConfig { repetitions: 2, ..Default::default() };
        let r = bench(&m, std::slice::from_ref(&u), &cfg).unwrap();
        assert_eq!(r.utterances.len(), 1);
        assert!(r.rt_percentile > 0.0);
        assert_eq!(r.mode, "float32");
        assert!(matches!(bench(&m, &[], &cfg), Err(BenchError::EmptyInput)));
        let empty = Utterance::new(Vec::new(), 0.01).unwrap();
        assert!(matches!(bench(&m, &[empty], &cfg), Err(BenchError::EmptyUtterance(_))));
    }

    proptest! {
        #[test]
        fn nearest_rank_is_an_element_with_enough_mass(v in prop::collection::vec(0.0f64..100.0, 1..60), p in 0.01f64..=1.0) {
            let r = nearest_rank(&v, p).unwrap();
            prop_assert!(v.contains(&r));
            let at_or_below = v.iter().filter(|&&x| x <= r).count() as f64;
            let below = v.iter().filter(|&&x| x < r).count() as f64;
            prop_assert!(at_or_below >= p * v.len() as f64 - 1e-9);
            prop_assert!(below < p * v.len() as f64);
        }
    }
}
