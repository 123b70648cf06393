// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{build, check, leaves, N_OPS};
use proptest::prelude::*;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut graphs = 0;
    for op in 0..N_OPS {
        for seed in 0..8 {
            check(&[op], seed).unwrap();
            graphs += 1;
        }
    }
    assert!(graphs >= 100);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_chains_match_finite_differences(
        program in proptest::collection::vec(0..N_OPS, 1..5),
        seed in any::<u64>(),
    ) {
        check(&program, seed).map_err(TestCaseError::fail)?;
    }
}

#[test]
fn backward_consumes_the_tape() {
    let (mut t, out, _) = build(&[6], &leaves(0), 0);
    t.backward(out).unwrap();
    assert!(t.backward(out).is_err());
}
