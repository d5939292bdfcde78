mod common;

use common::identities;

#[test]
fn weight_constraint_extremes_are_exact() {
    identities::weight_constraint_extremes_are_exact();
}

#[test]
fn uniform_logits_give_log_c() {
    identities::uniform_logits_give_log_c();
}

#[test]
fn zero_beta_total_equals_source_objective() {
    identities::zero_beta_total_equals_source_objective();
}

#[test]
fn training_descends_and_pushes_branches_apart() {
    identities::training_descends_and_pushes_branches_apart();
}
