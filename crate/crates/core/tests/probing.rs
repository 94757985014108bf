mod common;

use common::{constant_probe, one_hot_probe_accuracy, probe_curves_check, shuffle_control};

#[test]
fn one_hot_features_are_decoded() {
    let acc = one_hot_probe_accuracy();
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn constant_features_fall_back_to_majority() {
    for standardize in [true, false] {
        let (acc, majority) = constant_probe(standardize);
        assert!((acc - majority).abs() <= 0.02, "{acc} vs majority {majority}");
    }
}

#[test]
fn shuffled_labels_sit_at_majority() {
    let c = shuffle_control();
    assert!((c.shuffled - c.majority).abs() <= 0.05, "{} vs majority {}", c.shuffled, c.majority);
    // The unshuffled labels are far easier: token identity alone decides most tags.
    assert!(c.real > c.shuffled + 0.2);
}

#[test]
fn probing_reports_every_layer_and_leaves_weights_alone() {
    let (shapes_ok, untouched) = probe_curves_check();
    assert!(shapes_ok);
    assert!(untouched);
}
