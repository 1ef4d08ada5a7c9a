mod support;

use support::grad_cases::{network_cases, op_cases, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    let failed: Vec<String> = op_cases()
        .into_iter()
        .filter(|c| !c.report.passed())
        .map(|c| format!("{}: {:.3e}", c.name, c.report.max_rel_error))
        .collect();
    assert!(failed.is_empty(), "tolerance {TOLERANCE}: {failed:?}");
}

#[test]
fn whole_network_matches_finite_differences() {
    let failed: Vec<String> = network_cases()
        .into_iter()
        .filter(|c| !c.report.passed())
        .map(|c| format!("{}: {:.3e}", c.name, c.report.max_rel_error))
        .collect();
    assert!(failed.is_empty(), "tolerance {TOLERANCE}: {failed:?}");
}
