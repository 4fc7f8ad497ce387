mod common;

use common::{first_order_error, second_order_error, OP_KINDS};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        for kind in OP_KINDS {
            let err = first_order_error(kind, seed);
            prop_assert!(err < 1e-4, "{kind}: rel err {err}");
        }
    }

    #[test]
    fn every_op_is_twice_differentiable(seed in any::<u64>()) {
        for kind in OP_KINDS {
            let err = second_order_error(kind, seed);
            prop_assert!(err < 1e-4, "{kind}: rel err {err}");
        }
    }
}
