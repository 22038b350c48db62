mod common;

use alt_core::ctc::{ctc_gradient, ctc_loss, min_frames, CtcPrefixScorer};
use alt_core::numerics::{rng, LOG_FLOOR};
use common::{brute_force_ctc, random_logp};
use proptest::prelude::*;

fn case() -> impl Strategy<Value = (u64, usize, usize, Vec<usize>)> {
    (any::<u64>(), 1usize..=5, 2usize..=4)
        .prop_flat_map(|(seed, t, v)| (Just(seed), Just(t), Just(v), prop::collection::vec(1..v, 0..=3)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn forward_matches_enumeration((seed, t, v, target) in case()) {
        let logp = random_logp(&mut rng::stream(seed, "ctc", 0), t, v);
        let want = brute_force_ctc(&logp, &target, 0);
        let got = ctc_loss(&logp, &target, 0).unwrap();
        if want.is_infinite() {
            prop_assert!(!got.feasible);
        } else {
            prop_assert!((got.value - want).abs() < 1e-9, "{} vs {}", got.value, want);
        }
    }

    #[test]
    fn feasibility_is_the_frame_bound((seed, t, v, target) in case()) {
        let logp = random_logp(&mut rng::stream(seed, "ctc", 1), t, v);
        prop_assert_eq!(ctc_loss(&logp, &target, 0).unwrap().feasible, min_frames(&target) <= t);
    }

    #[test]
    fn prefix_final_equals_forward((seed, t, v, target) in case()) {
        let logp = random_logp(&mut rng::stream(seed, "ctc", 2), t, v);
        let fwd = ctc_loss(&logp, &target, 0).unwrap();
        let pre = CtcPrefixScorer::new(&logp, 0).unwrap().score_sequence(&target).unwrap();
        if fwd.feasible {
            prop_assert!((pre.log_final() + fwd.value).abs() < 1e-9);
        } else {
            prop_assert!(pre.log_final() <= LOG_FLOOR);
        }
    }

    #[test]
    fn prefix_mass_bounds_final_mass((seed, t, v, target) in case()) {
        let logp = random_logp(&mut rng::stream(seed, "ctc", 3), t, v);
        let st = CtcPrefixScorer::new(&logp, 0).unwrap().score_sequence(&target).unwrap();
        prop_assert!(st.log_final() <= st.log_prefix + 1e-12);
    }

    /// Occupancies sum to one per frame, so the gradient with respect to
    /// free log-probabilities sums to minus one per row.
    #[test]
    fn gradient_rows_sum_to_minus_one((seed, t, v, target) in case()) {
        let logp = random_logp(&mut rng::stream(seed, "ctc", 4), t, v);
        if let Some(grad) = ctc_gradient(&logp, &target, 0).unwrap() {
            for r in 0..t {
                prop_assert!((grad.row(r).iter().sum::<f64>() + 1.0).abs() < 1e-9);
            }
        }
    }
}
