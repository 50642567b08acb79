//! Central finite-difference checks of every differentiable operation and
//! of sampled end-to-end model parameters.

mod common;

use common::suite::{self, Checks};
use common::{MODEL_TOL, OP_TOL};
use qmamba_core::scan2d::ScanMode;

fn assert_ops(checks: Checks) {
    for (name, err) in checks {
        assert!(err <= OP_TOL, "{name}: relative error {err:e} > {OP_TOL:e}");
    }
}

#[test]
fn elementwise_and_broadcast() {
    assert_ops(suite::elementwise_and_broadcast());
}

#[test]
fn linear_algebra_and_convolution() {
    assert_ops(suite::linear_algebra_and_convolution());
}

#[test]
fn scan_orders() {
    assert_ops(suite::scan_orders());
}

#[test]
fn selective_scan_both_paths() {
    assert_ops(suite::selective_scan_both_paths());
}

#[test]
fn styleprompt_adapter() {
    assert_ops(suite::styleprompt_adapter());
}

fn model_check(mode: ScanMode, prompts: usize, mlp_ratio: usize) {
    let m = suite::model_check(mode, prompts, mlp_ratio);
    assert!(m.checked >= m.total / 100);
    assert!(m.worst <= MODEL_TOL, "{mode} model: {:e} at {} ({} entries)", m.worst, m.worst_name, m.checked);
}

#[test]
fn end_to_end_local() {
    model_check(ScanMode::Local, 0, 0);
}

#[test]
fn end_to_end_cross_with_adapters_and_mlp() {
    model_check(ScanMode::Cross, 3, 2);
}
