mod support;

use support::{composed_trial, op_trial, OP_NAMES};

#[test]
fn every_op_matches_central_differences() {
    for (op, name) in OP_NAMES.iter().enumerate() {
        for t in 0..6 {
            let r = op_trial(op, 100 * op as u64 + t);
            assert!(r.max_error < 1e-3, "{name} trial {t}: {r:?}");
        }
    }
}

#[test]
fn composed_objective_matches_central_differences() {
    for seed in 0..10 {
        let r = composed_trial(seed, 40);
        assert!(r.max_error < 1e-3, "seed {seed}: {r:?}");
    }
}
