mod common;

use common::{encoder_gradient_errors, op_gradient_errors, MODEL_TOL, OP_TOL};

#[test]
fn every_op_matches_central_differences() {
    let errs = op_gradient_errors();
    assert!(errs.len() >= 30);
    for (name, err) in errs {
        assert!(err < OP_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn one_layer_encoder_with_stacked_adapters() {
    for (name, err) in encoder_gradient_errors() {
        assert!(err < MODEL_TOL, "{name}: relative error {err:e}");
    }
}
