//! Central-difference checks of every analytic gradient.

mod common;

use common::{FD_CASES, FD_TOLERANCE};

fn check(name: &str, f: fn(u64) -> f64) {
    for case in 0..FD_CASES {
        let err = f(case);
        assert!(err < FD_TOLERANCE, "{name} case {case}: relative error {err:e}");
    }
}

#[test]
fn matmul() {
    check("matmul", common::fd_matmul);
}

#[test]
fn conv2d_input() {
    check("conv2d input", common::fd_conv_input);
}

#[test]
fn conv2d_kernel() {
    check("conv2d kernel", common::fd_conv_kernel);
}

#[test]
fn maxpool2d() {
    check("maxpool2d", common::fd_maxpool);
}

#[test]
fn relu() {
    check("relu", common::fd_relu);
}

#[test]
fn log_softmax() {
    check("log_softmax", common::fd_log_softmax);
}

#[test]
fn dropout_with_fixed_mask() {
    check("dropout", common::fd_dropout);
}

#[test]
fn pad2d() {
    check("pad2d", common::fd_pad);
}

#[test]
fn linear() {
    check("linear input", common::fd_linear_input);
    check("linear weight", common::fd_linear_weight);
    check("linear bias", common::fd_linear_bias);
}

#[test]
fn nll_loss() {
    check("nll_loss", common::fd_nll);
}
