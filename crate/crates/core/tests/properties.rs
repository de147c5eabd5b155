mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trip(seed in any::<u64>()) {
        common::prop_round_trip(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn purity_bridge(seed in any::<u64>()) {
        common::prop_purity_bridge(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn lindbladian_invariant_under_unravelling(seed in any::<u64>()) {
        common::prop_unravelling_invariance(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn bloch_and_operator_residuals_agree(seed in any::<u64>()) {
        common::prop_residual_equivalence(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn dedup_is_idempotent(seed in any::<u64>()) {
        common::prop_dedup_idempotent(seed).map_err(TestCaseError::fail)?;
    }
}
