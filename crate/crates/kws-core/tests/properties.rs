//! Property tests over the evaluation and numeric invariants.

use proptest::collection::vec;
use proptest::prelude::*;

use kws_core::eval::{default_thresholds, det_curve, endpoint_deltas, fa_at_mr};
use kws_core::streaming::Detection;
use kws_core::tensor::{softmax_lastdim, Tensor};

fn scores_and_labels() -> impl Strategy<Value = (Vec<f32>, Vec<bool>)> {
    (4usize..48).prop_flat_map(|n| {
        (
            vec((0u16..=256).prop_map(|k| k as f32 / 256.0), n),
            vec(any::<bool>(), n),
        )
            .prop_map(|(scores, mut labels)| {
                // force both classes
                labels[0] = true;
                labels[1] = false;
                (scores, labels)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn det_curve_is_monotone((scores, labels) in scores_and_labels()) {
        let curve = det_curve(&scores, &labels, &default_thresholds()).unwrap();
        for pair in curve.points.windows(2) {
            prop_assert!(pair[1].miss_rate >= pair[0].miss_rate);
            prop_assert!(pair[1].false_detect_rate <= pair[0].false_detect_rate);
        }
    }

    #[test]
    fn fa_at_mr_is_a_rank_statistic(
        (scores, labels) in scores_and_labels(),
        target in 0.05f64..0.5,
    ) {
        // squaring is strictly increasing on [0, 1] and exact on the score grid
        let squared: Vec<f32> = scores.iter().map(|s| s * s).collect();
        let base = fa_at_mr(&det_curve(&scores, &labels, &scores).unwrap(), target).unwrap();
        let mapped = fa_at_mr(&det_curve(&squared, &labels, &squared).unwrap(), target).unwrap();
        prop_assert_eq!(base.false_detects, mapped.false_detects);
        prop_assert_eq!(base.degraded, mapped.degraded);
        prop_assert!((base.miss_rate - mapped.miss_rate).abs() < 1e-12);
    }

    #[test]
    fn endpoint_deltas_are_antisymmetric(
        spans in vec((0usize..200, 1usize..60, 0usize..200, 1usize..60), 1..12),
    ) {
        let detections: Vec<Vec<Detection>> = spans
            .iter()
            .map(|&(s, len, _, _)| {
                vec![Detection {
                    score: 0.9,
                    start_frame: s,
                    end_frame: s + len,
                    trigger_frame: s + len,
                }]
            })
            .collect();
        let references: Vec<(usize, usize)> = spans
            .iter()
            .map(|&(s, len, off, olen)| {
                // keep some overlap so every pair matches
                let rs = s.saturating_sub(off % (len + 1));
                (rs, s + len + olen % 8)
            })
            .collect();
        let forward = endpoint_deltas(&detections, &references, 10.0).unwrap();
        // swap roles: references become detections and vice versa
        let swapped_dets: Vec<Vec<Detection>> = references
            .iter()
            .map(|&(s, e)| {
                vec![Detection {
                    score: 0.9,
                    start_frame: s,
                    end_frame: e,
                    trigger_frame: e,
                }]
            })
            .collect();
        let swapped_refs: Vec<(usize, usize)> = detections
            .iter()
            .map(|d| (d[0].start_frame, d[0].end_frame))
            .collect();
        let backward = endpoint_deltas(&swapped_dets, &swapped_refs, 10.0).unwrap();
        prop_assert_eq!(forward.matched, backward.matched);
        prop_assert!(
            (forward.mean_signed_end_delta_ms + backward.mean_signed_end_delta_ms).abs() < 1e-9
        );
        prop_assert!(
            (forward.mean_abs_end_delta_ms - backward.mean_abs_end_delta_ms).abs() < 1e-9
        );
        prop_assert!(
            (forward.mean_abs_start_delta_ms - backward.mean_abs_start_delta_ms).abs() < 1e-9
        );
    }

    #[test]
    fn softmax_slices_are_simplex(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let x = Tensor::new(vec![rows, cols], data).unwrap();
        let s = softmax_lastdim(&x).unwrap();
        for r in 0..rows {
            let row = s.row(r);
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for &v in row {
                prop_assert!(v > 0.0 && v <= 1.0);
            }
        }
    }
}
