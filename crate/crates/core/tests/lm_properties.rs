mod support;

use support::checks::{grad_check_run, overfit_run, zero_lr_run};

#[test]
fn gradients_match_central_differences() {
    let report = grad_check_run(1e-4);
    assert!(report.checked >= 100);
    assert!(report.max_relative_error < 1e-4, "{}", report.max_relative_error);
}

#[test]
fn coarse_step_still_agrees_loosely() {
    let report = grad_check_run(1e-3);
    assert!(report.max_relative_error < 1e-2, "{}", report.max_relative_error);
}

#[test]
fn one_batch_is_memorized() {
    let ppl = overfit_run(200);
    assert!(ppl < 1.5, "{ppl}");
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    assert!(zero_lr_run(20));
}
