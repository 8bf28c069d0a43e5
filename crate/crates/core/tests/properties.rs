//! Property tests over the public kernels and containers.

use ernn_core::blocksparse::pad_to_blocks;
use ernn_core::fixedpoint::{dequantize, quantize_symmetric};
use ernn_core::pruning::{compute_block_mask, prune_to_block_sparse};
use ernn_core::{BitWidth, BlockShape, BlockSparseMatrix, Matrix, PruningSchedule, Utterance};
use proptest::prelude::*;

fn matrix(max: usize) -> impl Strategy<Value = Matrix<f32>> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop_oneof![3 => -1.0f32..1.0, 1 => Just(0.0f32)], r * c)
            .prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

fn block() -> impl Strategy<Value = BlockShape> {
    prop_oneof![Just((1, 1)), Just((16, 1)), Just((4, 4)), Just((2, 3)), Just((8, 1))]
        .prop_map(|(r, c)| BlockShape::new(r, c).unwrap())
}

proptest! {
    #[test]
    fn bcsr_round_trips_dense(m in matrix(40), b in block()) {
        let m = pad_to_blocks(&m, b);
        let s = BlockSparseMatrix::from_dense(&m, b).unwrap();
        prop_assert!(s.validate().is_ok());
        prop_assert_eq!(s.to_dense(), m);
        prop_assert_eq!(s.ledger().len(), s.block_rows() + s.stored_blocks());
    }

    #[test]
    fn pruned_matrix_has_requested_block_count(m in matrix(40), b in block(), sparsity in 0.0f64..=1.0) {
        let m = pad_to_blocks(&m, b);
        let mask = compute_block_mask(&m, sparsity, b).unwrap();
        let s = prune_to_block_sparse(&m, sparsity, b).unwrap();
        // Blocks that are all zero are never stored, even when the mask keeps them.
        prop_assert!(s.stored_blocks() <= mask.len() - mask.pruned_count());
        let expected = (sparsity * mask.len() as f64 + 0.5).floor() as usize;
        prop_assert_eq!(mask.pruned_count(), expected.min(mask.len()));
    }

    #[test]
    fn schedule_stays_in_range(si in 0.0f64..0.5, sf in 0.5f64..0.99, t0 in 0u64..100, len in 1u64..1000, t in 0u64..2000) {
        let s = PruningSchedule::new(si, sf, t0, t0 + len).unwrap();
        let v = s.sparsity_at_step(t);
        prop_assert!(v >= si && v <= sf);
    }

    #[test]
    fn quantization_error_is_half_a_step(v in prop::collection::vec(-50.0f32..50.0, 1..100)) {
        let q = quantize_symmetric(&v, BitWidth::W8).unwrap();
        for (a, b) in dequantize(&q).iter().zip(&v) {
            prop_assert!((a - b).abs() <= q.scale() / 2.0 + b.abs() * f32::EPSILON);
        }
    }

    #[test]
    fn utterance_bytes_round_trip(frames in prop::collection::vec(prop::collection::vec(-1e3f32..1e3, 5), 1..20)) {
        let u = Utterance::new(frames, 0.01).unwrap();
        let mut bytes = Vec::new();
        u.write(&mut bytes).unwrap();
        let back = Utterance::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.frames, u.frames);
    }
}
