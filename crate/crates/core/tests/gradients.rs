mod common;

use common::{family_fd_error, modulation_fd_error, rng, Family, FAMILIES, FD_INSTANCES, FD_REL_TOL};

fn check(family: Family) {
    let err = family_fd_error(family, 11 + family as u64);
    assert!(err <= FD_REL_TOL, "{family:?}: worst relative gradient error {err:e}");
}

#[test]
fn sinusoidal_encoding_with_fc_stem() {
    check(Family::SinusoidalEncoding);
}

#[test]
fn temporal_grid_encoding() {
    check(Family::GridEncoding);
}

#[test]
fn xy_encoding_with_attention_stem() {
    check(Family::XyEncoding);
}

#[test]
fn mlp_stem() {
    check(Family::MlpStem);
}

#[test]
fn basic_blocks() {
    check(Family::NervBlock);
}

#[test]
fn group_conv_blocks() {
    check(Family::FfnervBlock);
}

#[test]
fn bilinear_blocks() {
    check(Family::BilinearBlock);
}

#[test]
fn temporal_skips() {
    check(Family::TemporalSkip);
}

#[test]
fn local_grid_skips() {
    check(Family::LocalGridSkip);
}

#[test]
fn heads_and_final_activations() {
    check(Family::Head);
}

#[test]
fn hypo_weight_modulation() {
    let mut r = rng(5);
    for i in 0..FD_INSTANCES {
        let err = modulation_fd_error(&mut r);
        assert!(err <= FD_REL_TOL, "instance {i}: worst relative gradient error {err:e}");
    }
}

#[test]
fn every_family_is_covered() {
    assert_eq!(FAMILIES.len(), 10);
}
