//! Release gates: every check prints one pass/fail line with the measured
//! numbers and its runtime, and the build fails if any gate fails.

use amoe_smc::selfcheck::{acceptance, CheckReport};

fn assert_gate(report: CheckReport) {
    println!("{}", report.line());
    assert!(report.passed, "{}", report.line());
}

#[test]
fn a1_quadrature_em_agreement() {
    assert_gate(acceptance::a1_quadrature_em_agreement());
}

#[test]
fn a2_fixed_point_gradient() {
    assert_gate(acceptance::a2_fixed_point_gradient());
}

#[test]
fn a3_single_step_adaptation() {
    assert_gate(acceptance::a3_single_step_adaptation());
}

#[test]
fn a4_step_size_sweep() {
    assert_gate(acceptance::a4_step_size_sweep());
}

#[test]
fn a5_range_observation_refit() {
    assert_gate(acceptance::a5_range_observation_refit());
}

#[test]
fn a6_sequential_filtering() {
    assert_gate(acceptance::a6_sequential_filtering());
}

#[test]
fn a7_censored_family_comparison() {
    assert_gate(acceptance::a7_censored_family_comparison());
}

#[test]
fn a8_update_optimality() {
    assert_gate(acceptance::a8_update_optimality());
}

#[test]
fn a9_heavy_tail_identities() {
    assert_gate(acceptance::a9_heavy_tail_identities());
}

#[test]
fn a10_optimal_kernel_uniformity() {
    assert_gate(acceptance::a10_optimal_kernel_uniformity());
}
