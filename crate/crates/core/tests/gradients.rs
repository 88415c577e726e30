mod common;

#[test]
fn every_op_matches_central_differences() {
    for (op, err) in common::op_gradient_errors() {
        assert!(err < 1e-5, "{op}: relative error {err:e}");
    }
}

#[test]
fn reduced_encoder_matches_central_differences() {
    let err = common::encoder_gradient_error(12);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn total_loss_matches_central_differences_in_every_mode() {
    for (mode, err) in common::loss_mode_gradient_errors() {
        assert!(err < 1e-5, "{mode}: relative error {err:e}");
    }
}
