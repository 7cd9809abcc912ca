mod common;

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..5 {
        for (op, err) in common::op_grad_cases(seed) {
            assert!(err <= 1e-3, "{op} seed {seed}: relative error {err:.2e}");
        }
    }
}

#[test]
fn blocks_match_central_differences() {
    for seed in 0..5 {
        for (block, r) in common::block_grad_cases(seed) {
            assert!(r.error() <= 1e-3, "{block} seed {seed}: {r:?}");
            assert!(
                r.excluded_fraction() <= 0.10,
                "{block} seed {seed}: too many kinked coordinates {r:?}"
            );
        }
    }
}
