use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use boxcast::box_core::{BoxCodec, BoxParams, Normalizer, Quantizer, SymmetryMode};
use boxcast::dist::{Context, OrderedAnalytic, ParamOrder, TabularChain};
use boxcast::error::Error;
use boxcast::geometry::iog;
use boxcast::inference::{quantile_box_from_sample, sample_occupancy};
use boxcast::metrics::{pearson, roc_auc, spearman};

fn codec(bins: u32) -> BoxCodec {
    BoxCodec::new(Normalizer::identity(), Quantizer::with_bins(bins), SymmetryMode::None)
}

/// Nested boxes sharing one corner, rotated about z.
fn nested(n: usize, yaw: f64) -> Vec<BoxParams> {
    let (c, s) = (yaw.cos(), yaw.sin());
    (1..=n)
        .map(|i| {
            let d = [0.2 + 0.12 * i as f64, 0.15 + 0.1 * i as f64, 0.1 + 0.08 * i as f64];
            let local = [d[0] / 2.0, d[1] / 2.0, d[2] / 2.0];
            let center = [c * local[0] - s * local[1], s * local[0] + c * local[1], local[2]];
            BoxParams::with_yaw(d, center, yaw)
        })
        .collect()
}

fn probs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05..1.0f64, 2..=4).prop_map(|w| {
        let t: f64 = w.iter().sum();
        w.iter().map(|x| x / t).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn quantiles_shrink_as_q_grows(seed in any::<u64>(), q1 in 0.02..0.5f64, dq in 0.0..0.45f64) {
        let q2 = q1 + dq;
        let chain = TabularChain::uniform(codec(6), ParamOrder::default(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = Arc::new(sample_occupancy(&chain, &Context::new(0), 32, 27, &mut rng).unwrap());
        let lo = quantile_box_from_sample(sample.clone(), q1);
        match quantile_box_from_sample(sample, q2) {
            Ok(hi) => {
                let lo = lo.expect("a lower quantile is never empty when a higher one is not");
                prop_assert!(hi.members.iter().all(|i| lo.members.binary_search(i).is_ok()));
                prop_assert!(hi.quantile_box.volume() <= lo.quantile_box.volume() * (1.0 + 1e-9));
            }
            Err(Error::QuantileTooHigh { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected error {}", e),
        }
    }

    #[test]
    fn quantile_box_contains_truth_with_probability_at_least_one_minus_q(
        p in probs(),
        q in 0.1..0.9f64,
        yaw in -1.0..1.0f64,
        seed in any::<u64>(),
    ) {
        let boxes = nested(p.len(), yaw);
        let d = OrderedAnalytic::new(boxes.clone(), p.clone(), codec(512)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reps = 4;
        let mut covered = 0.0;
        for _ in 0..reps {
            let sample = Arc::new(sample_occupancy(&d, &Context::new(0), 400, 8, &mut rng).unwrap());
            let Ok(r) = quantile_box_from_sample(sample, q) else {
                // Only possible when the top mass is at most q.
                prop_assert!(p.iter().cloned().fold(0.0, f64::max) <= q + 0.1);
                covered += 1.0 - q;
                continue;
            };
            // Exact probability over the truth, given this quantile box.
            covered += boxes
                .iter()
                .zip(&p)
                .filter(|(b, _)| iog(&r.quantile_box, b) >= 1.0 - 1e-6)
                .map(|(_, w)| w)
                .sum::<f64>();
        }
        let rate = covered / reps as f64;
        // Sampling error of the occupancy estimate with 400 boxes is below 0.1.
        prop_assert!(rate >= 1.0 - q - 0.1, "coverage {} at q {}", rate, q);
    }

    #[test]
    fn auc_matches_pair_count(scores in prop::collection::vec(0u8..6, 2..40), labels in prop::collection::vec(any::<bool>(), 40)) {
        let scores: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let labels = &labels[..scores.len()];
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        match roc_auc(&scores, labels) {
            Some(auc) => prop_assert!((auc - wins / pairs).abs() < 1e-12),
            None => prop_assert_eq!(pairs, 0.0),
        }
    }

    #[test]
    fn spearman_matches_rank_difference_formula(perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle()) {
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 1.5).collect();
        let y: Vec<f64> = perm.iter().map(|&r| (r as f64).exp()).collect();
        let n = 12.0;
        let d2: f64 = perm.iter().enumerate().map(|(i, &r)| (i as f64 - r as f64).powi(2)).sum();
        let expected = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        prop_assert!((spearman(&x, &y).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn pearson_trivial_cases() {
    assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), Some(1.0));
    assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), None);
}
