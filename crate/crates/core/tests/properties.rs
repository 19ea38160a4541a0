//! Property-based invariants: headloss law symmetry and monotonicity,
//! conformal quantile behavior, fusion correctness, and selection
//! optimality.

use aquatwin::conformal::conformal_quantile;
use aquatwin::hydraulics::hazen_williams_headloss;
use aquatwin::network::{grid_network, hanoi_builtin, parse_inp, serialize_inp};
use aquatwin::sampling::{fuse_state, select_nodes, NoiseMode, SamplingPolicy};
use aquatwin::seeding::{stream_rng, tags};
use proptest::prelude::*;

proptest! {
    #[test]
    fn headloss_is_odd_in_flow(
        q in 0.01f64..500.0,
        length in 1.0f64..5000.0,
        diameter in 0.05f64..1.5,
        roughness in 40.0f64..160.0,
    ) {
        let plus = hazen_williams_headloss(q, length, diameter, roughness);
        let minus = hazen_williams_headloss(-q, length, diameter, roughness);
        prop_assert!((plus + minus).abs() <= 1e-12 * plus.abs().max(1.0));
        prop_assert!(plus > 0.0);
    }

    #[test]
    fn headloss_is_monotone_in_flow_magnitude(
        q1 in 0.01f64..400.0,
        extra in 0.01f64..100.0,
        length in 1.0f64..5000.0,
        diameter in 0.05f64..1.5,
        roughness in 40.0f64..160.0,
    ) {
        let small = hazen_williams_headloss(q1, length, diameter, roughness);
        let large = hazen_williams_headloss(q1 + extra, length, diameter, roughness);
        prop_assert!(large > small);
    }

    #[test]
    fn quantile_is_monotone_in_alpha_and_bounded(
        values in proptest::collection::vec(0.0f64..100.0, 60..200),
        alpha_lo in 0.05f64..0.2,
        gap in 0.01f64..0.3,
    ) {
        let alpha_hi = (alpha_lo + gap).min(0.45);
        let q_lo = conformal_quantile(&values, alpha_lo).unwrap().value;
        let q_hi = conformal_quantile(&values, alpha_hi).unwrap().value;
        prop_assert!(q_lo >= q_hi);
        let max = values.iter().cloned().fold(0.0f64, f64::max);
        prop_assert!(q_lo <= max);
    }

    #[test]
    fn fusion_is_bitwise_measured_or_predicted(
        truth in proptest::collection::vec(0.0f64..50.0, 8),
        preds in proptest::collection::vec(0.0f64..50.0, 8),
        mask in 0u8..=255,
    ) {
        let selected: Vec<usize> = (0..8).filter(|i| mask & (1 << i) != 0).collect();
        let mut rng = stream_rng(0, &[tags::SENSOR_NOISE]);
        let fused = fuse_state(&truth, &preds, &selected, 0.0, NoiseMode::Additive, &mut rng);
        for i in 0..8 {
            if selected.contains(&i) {
                prop_assert_eq!(fused[i], truth[i]);
            } else {
                prop_assert_eq!(fused[i], preds[i].max(0.0));
            }
        }
    }

    #[test]
    fn adaptive_selection_is_brute_force_optimal(
        scores in proptest::collection::vec(0.0f64..10.0, 4..12),
        budget_frac in 0.1f64..0.9,
    ) {
        let n = scores.len();
        let budget = ((budget_frac * n as f64) as usize).clamp(1, n);
        let mut rng = stream_rng(0, &[tags::POLICY]);
        let selected = select_nodes(&SamplingPolicy::Adaptive, &scores, budget, 0, &mut rng)
            .unwrap();
        let chosen: f64 = selected.iter().map(|&i| scores[i]).sum();
        let mut best = 0.0f64;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != budget {
                continue;
            }
            let total: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| scores[i]).sum();
            best = best.max(total);
        }
        prop_assert!((chosen - best).abs() < 1e-9);
    }

    #[test]
    fn uniform_random_selection_has_exact_budget(
        n in 2usize..40,
        budget_frac in 0.05f64..1.0,
        seed in 0u64..1000,
    ) {
        let budget = ((budget_frac * n as f64) as usize).clamp(1, n);
        let scores = vec![0.0; n];
        let mut rng = stream_rng(seed, &[tags::POLICY]);
        let selected =
            select_nodes(&SamplingPolicy::UniformRandom, &scores, budget, 0, &mut rng).unwrap();
        prop_assert_eq!(selected.len(), budget);
        prop_assert!(selected.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(selected.iter().all(|&i| i < n));
    }
}

#[test]
fn inp_serialization_is_a_fixpoint_on_fixtures() {
    for net in [hanoi_builtin(), grid_network(3, 4, 1.5)] {
        let text = serialize_inp(&net);
        let reparsed = parse_inp(&text).unwrap().network;
        assert_eq!(reparsed, net);
        // Serializing again is byte-stable.
        assert_eq!(serialize_inp(&reparsed), text);
    }
}
