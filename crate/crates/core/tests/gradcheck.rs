mod common;

use common::{gradient_check, tiny_config};
use corncount::model::Reduction;

#[test]
fn maxpool_network_gradients() {
    let r = gradient_check(tiny_config(Reduction::MaxPool, false), 12, 12);
    assert!(r.worst_rel <= 1e-4, "worst {} at {}", r.worst_rel, r.worst_name);
    assert!(r.nonzero * 2 > r.params, "{} of {} gradients non-zero", r.nonzero, r.params);
}

#[test]
fn strided_network_gradients_odd_size() {
    let r = gradient_check(tiny_config(Reduction::StridedConv, false), 11, 9);
    assert!(r.worst_rel <= 1e-4, "worst {} at {}", r.worst_rel, r.worst_name);
    assert!(r.nonzero * 2 > r.params, "{} of {} gradients non-zero", r.nonzero, r.params);
}

#[test]
fn clamped_output_gradients() {
    let r = gradient_check(tiny_config(Reduction::MaxPool, true), 10, 13);
    assert!(r.worst_rel <= 1e-4, "worst {} at {}", r.worst_rel, r.worst_name);
    assert!(r.nonzero * 2 > r.params, "{} of {} gradients non-zero", r.nonzero, r.params);
}
