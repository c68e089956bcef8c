mod common;

use common::grad_cases::{end_to_end_error, op_reports, MODEL_TOL, OP_TOL};

#[test]
fn every_op_matches_finite_differences() {
    let reports = op_reports();
    for r in &reports {
        assert!(r.worst < OP_TOL, "{}: worst relative error {:e} over {} instances", r.name, r.worst, r.instances);
    }
    assert!(reports.len() >= 19);
}

#[test]
fn end_to_end_two_layer_model() {
    let err = end_to_end_error();
    assert!(err < MODEL_TOL, "end-to-end relative error {err:e}");
}
