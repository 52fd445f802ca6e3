use domainmix_core::testing::{gradient_case, GRADIENT_CASES};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tape_gradients_match_central_differences(seed in any::<u64>()) {
        for name in GRADIENT_CASES {
            let err = gradient_case(name, seed).max_rel_error(1e-5).unwrap();
            prop_assert!(err < 1e-6, "{} seed {}: rel err {}", name, seed, err);
        }
    }
}
