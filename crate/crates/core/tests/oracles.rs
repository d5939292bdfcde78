mod common;

use common::oracle;

#[test]
fn dilated_conv_matches_direct_loops() {
    oracle::dilated_conv_matches_direct_loops();
}

#[test]
fn pseudo_labels_match_per_pixel_rule() {
    oracle::pseudo_labels_match_per_pixel_rule();
}

#[test]
fn confusion_and_iou_match_counting() {
    oracle::confusion_and_iou_match_counting();
}

#[test]
fn class_weights_match_pixel_counts() {
    oracle::class_weights_match_pixel_counts();
}
