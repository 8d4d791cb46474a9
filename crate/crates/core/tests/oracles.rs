//! Brute-force oracle equivalence for re-ranking, AP, similarities, MMD and
//! loss values.

mod common;

use common::oracles::*;

#[test]
fn k_reciprocal_matches_brute_force_exactly() {
    k_reciprocal_oracle(20, 11).unwrap();
}

#[test]
fn average_precision_matches_exhaustive_reference() {
    average_precision_oracle(20, 12).unwrap();
}

#[test]
fn pairwise_cosine_matches_double_loop() {
    pairwise_cosine_oracle(13).unwrap();
}

#[test]
fn mmd_matches_pooled_kernel_reference() {
    mmd_oracle(14).unwrap();
}

#[test]
fn go_value_matches_naive_sum() {
    go_value_oracle(15).unwrap();
}

#[test]
fn lo_value_matches_naive_sum() {
    lo_value_oracle(16).unwrap();
}
