use mactas::run::{run_checks, Faults};

#[test]
fn fresh_build_passes_every_check() {
    let report = run_checks(1, Faults::default());
    for c in &report.checks {
        assert!(c.passed, "{} failed: metric {} vs {} ({})", c.name, c.metric, c.threshold, c.detail);
    }
    assert!(report.passed);
}

#[test]
fn removing_weight_positivity_is_caught() {
    let report = run_checks(1, Faults { qmix_no_abs: true, ..Faults::default() });
    assert!(!report.passed);
    assert!(!report.get("qmix_monotonicity").unwrap().passed);
    assert!(report.get("passthrough").unwrap().passed);
}

#[test]
fn nonzero_comm_init_is_caught() {
    let report = run_checks(1, Faults { comm_nonzero_init: true, ..Faults::default() });
    assert!(!report.passed);
    assert!(!report.get("passthrough").unwrap().passed);
    assert!(report.get("qmix_monotonicity").unwrap().passed);
}
