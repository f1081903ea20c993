mod support;

use support::{amc_trial, frozen_trial};

#[test]
fn amc_outputs_stay_in_range() {
    for seed in 0..200 {
        let c = amc_trial(seed);
        assert!(c.violations().is_empty(), "seed {seed}: {:?}", c.violations());
    }
}

#[test]
fn background_branch_is_frozen() {
    for seed in 0..5 {
        let c = frozen_trial(seed);
        assert!(c.ok(), "seed {seed}: {c:?}");
    }
}
