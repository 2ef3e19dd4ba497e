mod common;

use common::{gcsl_instance, network_instance, FD_TOL};

const INSTANCES: u64 = 20;

#[test]
fn network_masked_bce_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let r = network_instance(seed, "bce");
        assert!(r.worst < FD_TOL, "instance {seed}: worst relative error {:e}", r.worst);
        assert!(r.checked > 10 * r.skipped, "instance {seed}: {r:?}");
    }
}

#[test]
fn network_softmax_ce_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let r = network_instance(100 + seed, "ce");
        assert!(r.worst < FD_TOL, "instance {seed}: worst relative error {:e}", r.worst);
        assert!(r.checked > 10 * r.skipped, "instance {seed}: {r:?}");
    }
}

#[test]
fn projected_session_matches_finite_differences() {
    for seed in 0..INSTANCES {
        let r = gcsl_instance(200 + seed);
        assert!(r.worst < FD_TOL, "instance {seed}: worst relative error {:e}", r.worst);
        assert!(r.checked > 10 * r.skipped, "instance {seed}: {r:?}");
    }
}
