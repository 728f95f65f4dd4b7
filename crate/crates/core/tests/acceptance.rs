//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! and holding the stated runtime budget. Run with `--nocapture` to see the
//! per-criterion lines.

use loramux_core::verify::{self, CheckReport};

fn assert_criterion(report: CheckReport, budget_seconds: f64) {
    println!(
        "[{}] criterion {:2} {:40} {:6.2}s  {}",
        if report.passed { "PASS" } else { "FAIL" },
        report.id,
        report.name,
        report.seconds,
        report.detail
    );
    assert!(report.passed, "criterion {} failed: {}", report.id, report.detail);
    assert!(
        report.seconds < budget_seconds,
        "criterion {} took {:.2}s, budget {budget_seconds}s",
        report.id,
        report.seconds
    );
}

#[test]
fn criterion_01_factored_merged_equivalence() {
    assert_criterion(verify::check_factored_merged_equivalence(), 1.0);
}

#[test]
fn criterion_02_kernel_semantics_oracle() {
    assert_criterion(verify::check_kernel_semantics(), 10.0);
}

#[test]
fn criterion_03_zero_external_fragmentation() {
    assert_criterion(verify::check_zero_fragmentation(), 10.0);
}

#[test]
fn criterion_04_tp_correctness_and_cost_exactness() {
    assert_criterion(verify::check_tp_costs(), 5.0);
}

#[test]
fn criterion_05_admission_theorem_oracle() {
    assert_criterion(verify::check_admission_theorem(), 30.0);
}

#[test]
fn criterion_06_workload_fidelity() {
    assert_criterion(verify::check_workload_fidelity(), 10.0);
}

#[test]
fn criterion_07_adapter_scaling_plateau() {
    assert_criterion(verify::check_adapter_scaling_plateau(), 60.0);
}

#[test]
fn criterion_08_merged_factored_crossover() {
    assert_criterion(verify::check_merge_crossover(), 60.0);
}

#[test]
fn criterion_09_policy_attainment_ordering() {
    assert_criterion(verify::check_abort_policy_ordering(), 60.0);
}

#[test]
fn criterion_10_early_abort_soundness() {
    assert_criterion(verify::check_abort_soundness(), 60.0);
}
