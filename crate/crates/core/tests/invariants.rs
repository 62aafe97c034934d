mod common;

use common::*;
use proptest::prelude::*;

fn check(res: Check) -> Result<(), TestCaseError> {
    res.map_err(TestCaseError::fail)
}

fn distribution(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, c).prop_map(|raw| {
        let s: f64 = raw.iter().sum::<f64>().max(1e-12);
        raw.iter().map(|v| v / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noise_injection_conserves_samples(
        n in 4usize..300, c in 2usize..6, rate in 0.0f64..=1.0, asym: bool, seed: u64,
    ) {
        check(check_noise_conservation(n, c, rate, asym, seed))?;
    }

    #[test]
    fn flip_rate_concentrates(rate in 0.0f64..=0.9, seed in 0u64..1000) {
        check(check_flip_concentration(rate, seed))?;
    }

    #[test]
    fn softmax_and_prior_normalised(
        (logits, prior) in (2usize..8).prop_flat_map(|c| (prop::collection::vec(-80.0f64..80.0, c), distribution(c))),
    ) {
        check(check_normalization(&logits, &prior))?;
    }

    #[test]
    fn class_prior_normalised(c in 2usize..8, labels in prop::collection::vec(0usize..8, 1..100)) {
        let labels: Vec<usize> = labels.into_iter().map(|y| y % c).collect();
        check(check_class_prior(&labels, c))?;
    }

    #[test]
    fn valid_mask_cardinality(losses in prop::collection::vec(0.0f64..5.0, 1..100), tau in 0.5f64..=100.0) {
        check(check_mask_cardinality(&losses, tau))?;
    }

    #[test]
    fn valid_mask_with_ties(losses in prop::collection::vec(0u8..3, 1..50), tau in 1.0f64..=100.0) {
        let losses: Vec<f64> = losses.into_iter().map(f64::from).collect();
        check(check_mask_cardinality(&losses, tau))?;
    }

    #[test]
    fn em_log_likelihood_monotone(seed: u64, n in 4usize..30, c in 2usize..6) {
        let m = random_loss_matrix(&mut rng(seed), n, c);
        check(check_em_monotone(&m))?;
    }

    #[test]
    fn detection_partition_is_disjoint_cover(seed: u64, n in 4usize..30, c in 2usize..6) {
        let m = random_loss_matrix(&mut rng(seed), n, c);
        check(check_partition_cover(&m))?;
    }

    #[test]
    fn aggregation_invariants(
        (points, shift, weights) in (1usize..10, 1usize..5).prop_flat_map(|(n, d)| (
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), n),
            prop::collection::vec(-100.0f64..100.0, d),
            prop::collection::vec(1.0f64..100.0, n),
        )),
    ) {
        check(check_aggregation_invariants(&points, &shift, &weights))?;
    }

    #[test]
    fn geometric_median_in_hull(
        points in (1usize..5).prop_flat_map(|d| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), 1..10)),
        seed: u64,
    ) {
        check(check_gm_in_hull(&points, seed))?;
    }

    #[test]
    fn estimated_label_softmax_invariant(logits in prop::collection::vec(-50.0f64..50.0, 2..8), shift in -100.0f64..100.0) {
        check(check_argmax_invariance(&logits, shift))?;
    }

    #[test]
    fn merged_belief_is_distribution_with_same_argmax(
        (p, s) in (2usize..6).prop_flat_map(|c| (distribution(c), distribution(c))),
        k in 0.5f64..1000.0,
    ) {
        use fedmask::correction::{argmax, merge_belief, LabelBelief};
        // a belief whose softmax is exactly `s` up to rounding
        let mut b = LabelBelief { logits: s.iter().map(|v| v.max(1e-300).ln()).collect() };
        let avg: Vec<f64> = p.iter().zip(&b.soft_label()).map(|(a, c)| (a + c) / 2.0).collect();
        merge_belief(&mut b, &p, k);
        let soft = b.soft_label();
        prop_assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut sorted = avg.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] > 1e-9 {
            prop_assert_eq!(argmax(&b.logits), argmax(&avg));
        }
    }
}

#[test]
fn gradient_suite_small() {
    for i in 0..50 {
        let errs = gradient_errors(&random_instance(i), 0.5, 0.1);
        for (name, e) in GRADIENT_NAMES.iter().zip(errs) {
            assert!(e <= FD_TOL, "instance {i}: {name} relative error {e:e}");
        }
    }
}

#[test]
fn weiszfeld_matches_grid_oracle() {
    use fedmask::aggregation::GeometricMedianOptions;
    use rand::Rng;
    let mut r = rng(7);
    let opts = GeometricMedianOptions {
        max_iter: 1000,
        ..Default::default()
    };
    for _ in 0..20 {
        let n = r.random_range(3..=15);
        let points: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let err = weiszfeld_error(&points, opts);
        assert!(err <= 1e-3, "{points:?}: {err}");
    }
}
